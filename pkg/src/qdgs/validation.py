"""Small input-validation helpers used at module boundaries."""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, EvaluationRejected


def as_float_vector(x, name: str = "value") -> np.ndarray:
    """Coerce to a 1-D float64 array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ConfigurationError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def require_finite(arr, name: str = "value", exc=EvaluationRejected) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise exc(f"{name} contains non-finite entries")
    return arr


def as_image(img, name: str = "image") -> np.ndarray:
    """Validate an (h, w, 3) float image with channels in [0, 1]."""
    arr = np.asarray(img, dtype=float)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ConfigurationError(f"{name} must have shape (h, w, 3), got {arr.shape}")
    return arr
