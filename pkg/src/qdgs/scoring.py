"""Objective and measure scoring.

Implements the contrastive probe-pair objective, the margin term against
recently generated images, the calibrated latent-space regularizer, and the
composite objective combining the three. Probes are plain callables mapping
an image to a similarity-like value, so an external embedding model can be
dropped in behind the same contract (see `Scorer`).
"""
from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import EvaluationRejected
from .validation import as_float_vector, as_image, require_finite

SIGNATURE_SIZE = 16
MEMORY_CAPACITY = 100
FD_STEP = 1e-3


@dataclass(frozen=True)
class ProbePair:
    """Positive/negative probe pair; each maps an image to a value in [-1, 1]."""

    positive: Callable[[np.ndarray], float]
    negative: Callable[[np.ndarray], float]


def contrastive_score(image, probe: ProbePair) -> float:
    """positive(image) - negative(image), in [-2, 2]."""
    pos = float(probe.positive(image))
    neg = float(probe.negative(image))
    if not (math.isfinite(pos) and math.isfinite(neg)):
        raise EvaluationRejected("probe returned a non-finite score")
    return pos - neg


def image_signature(image, size: int = SIGNATURE_SIZE) -> np.ndarray:
    """Cheap embedding stand-in: block-mean grayscale at size*size, mean-centered."""
    img = as_image(image)
    gray = img.mean(axis=2)
    h, w = gray.shape
    if h % size == 0 and w % size == 0:
        pooled = gray.reshape(size, h // size, size, w // size).mean(axis=(1, 3))
    else:
        pooled = np.array([[block.mean() for block in np.array_split(row, size, axis=1)]
                           for row in np.array_split(gray, size, axis=0)])
    flat = pooled.ravel()
    return flat - flat.mean()


class MarginMemory:
    """FIFO ring of image signatures from recent iterations."""

    def __init__(self, capacity: int = MEMORY_CAPACITY):
        self.capacity = int(capacity)
        self.entries: deque[np.ndarray] = deque(maxlen=self.capacity)
        self._stack: np.ndarray | None = None
        self._norms: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, signature: np.ndarray):
        self.entries.append(np.asarray(signature, dtype=float))
        self._stack = None

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        if self._stack is None:
            self._stack = np.stack(self.entries)
            self._norms = np.linalg.norm(self._stack, axis=1)
        return self._stack, self._norms


def update_memory(memory: MarginMemory, image) -> MarginMemory:
    memory.add(image_signature(image))
    return memory


def margin(image, memory: MarginMemory) -> float:
    """Maximum cosine similarity of the image signature to any memory entry."""
    if len(memory) == 0:
        return 0.0
    sig = image_signature(image)
    sig_norm = float(np.linalg.norm(sig))
    if sig_norm < 1e-12:
        return 0.0
    stack, norms = memory.stacked()
    sims = (stack @ sig) / (np.maximum(norms, 1e-12) * sig_norm)
    sims = np.where(norms < 1e-12, 0.0, sims)
    return float(sims.max())


@dataclass
class RegularizerSpec:
    """Standardization constants and boundary for the latent-distance penalty."""

    rho: float
    delta_reg: float
    center: np.ndarray
    scale: np.ndarray

    def as_dict(self) -> dict:
        return {"rho": self.rho, "delta_reg": self.delta_reg,
                "center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "RegularizerSpec":
        return cls(rho=float(data["rho"]), delta_reg=float(data["delta_reg"]),
                   center=np.asarray(data["center"], dtype=float),
                   scale=np.asarray(data["scale"], dtype=float))


def calibrate_regularizer(sampler: Callable[[int], np.ndarray], n: int = 10000,
                          rho: float = 0.5) -> RegularizerSpec:
    """Estimate per-dimension center/scale and the mean standardized distance.

    ``sampler(n)`` must return an (n, d) array of latent draws.
    """
    draws = np.asarray(sampler(int(n)), dtype=float)
    if draws.ndim != 2 or draws.shape[0] != n:
        raise EvaluationRejected(f"sampler returned shape {draws.shape}, expected ({n}, d)")
    center = draws.mean(axis=0)
    scale = draws.std(axis=0)
    floored = scale < 1e-8
    if np.any(floored):
        warnings.warn("zero-variance latent dimension(s); flooring scale at 1e-8",
                      stacklevel=2)
        scale = np.where(floored, 1e-8, scale)
    dists = np.sqrt((((draws - center) / scale) ** 2).sum(axis=1))
    delta_reg = float(dists.mean())
    if delta_reg <= 0.0:
        warnings.warn("degenerate calibration: all draws at the center", stacklevel=2)
    return RegularizerSpec(rho=float(rho), delta_reg=delta_reg, center=center, scale=scale)


def standardized_distance(theta, spec: RegularizerSpec) -> float:
    theta = as_float_vector(theta, "theta")
    return float(np.sqrt((((theta - spec.center) / spec.scale) ** 2).sum()))


def reg_penalty(theta, spec: RegularizerSpec) -> float:
    """Squared overshoot beyond the boundary rho * delta_reg; zero inside."""
    boundary = spec.rho * spec.delta_reg
    delta = standardized_distance(theta, spec)
    return (max(delta, boundary) - boundary) ** 2


@dataclass(frozen=True)
class ObjectiveWeights:
    beta1: float = 0.5
    beta2: float = 0.2

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("objective weights must be non-negative")


def composite_objective(theta, image, memory: MarginMemory, reg: RegularizerSpec,
                        weights: ObjectiveWeights, probe: ProbePair) -> float:
    """g_txt - beta1 * g_mgn - beta2 * g_reg."""
    g_txt = contrastive_score(image, probe)
    g_mgn = margin(image, memory)
    g_reg = reg_penalty(theta, reg)
    return g_txt - weights.beta1 * g_mgn - weights.beta2 * g_reg


def normalize_grads(grad_f, grad_m: Sequence) -> tuple[np.ndarray, list[np.ndarray]]:
    """Scale each gradient independently to unit L2 norm; zero stays zero."""
    def unit(g):
        g = as_float_vector(g, "gradient")
        norm = float(np.linalg.norm(g))
        return g if norm == 0.0 else g / norm
    return unit(grad_f), [unit(g) for g in grad_m]


def fd_gradient(fn: Callable[[np.ndarray], float], theta, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    theta = as_float_vector(theta, "theta")
    grad = np.zeros_like(theta)
    for d in range(theta.shape[0]):
        step = np.zeros_like(theta)
        step[d] = h
        hi = float(fn(theta + step))
        lo = float(fn(theta - step))
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise EvaluationRejected("non-finite probe value during finite differences")
        grad[d] = (hi - lo) / (2.0 * h)
    return grad


@dataclass
class Evaluation:
    """One solution's scores, with gradients when requested."""

    f: float
    m: np.ndarray
    grad_f: np.ndarray | None = None
    grad_m: list[np.ndarray] | None = None
    image: np.ndarray | None = field(default=None, repr=False)


class Scorer(Protocol):
    """Contract a scoring backend must satisfy.

    Given a latent solution and the image generated from it, return the
    objective value and the measure vector, plus their gradients with respect
    to theta when ``with_gradients`` is true. Implementations must be pure
    with respect to (theta, image) between calls to ``remember``; the
    pipeline calls ``remember`` once per iteration with the search point's
    image. An external embedding service can implement this contract in
    place of the built-in analytic probes.
    """

    def score(self, theta, image, with_gradients: bool = False) -> Evaluation: ...

    def remember(self, image) -> None: ...


class CompositeScorer:
    """Scorer combining a quality probe pair, measure probe pairs, the margin
    memory, and the latent regularizer; gradients via central differences."""

    def __init__(self, generator, quality_probe: ProbePair,
                 measure_probes: Sequence[ProbePair], reg: RegularizerSpec,
                 weights: ObjectiveWeights = ObjectiveWeights(),
                 memory_capacity: int = MEMORY_CAPACITY, fd_step: float = FD_STEP):
        self.generator = generator
        self.quality_probe = quality_probe
        self.measure_probes = list(measure_probes)
        self.reg = reg
        self.weights = weights
        self.memory = MarginMemory(capacity=memory_capacity)
        self.fd_step = fd_step

    def fresh(self) -> "CompositeScorer":
        """Copy with an empty margin memory (new trial)."""
        return CompositeScorer(self.generator, self.quality_probe, self.measure_probes,
                               self.reg, self.weights, self.memory.capacity, self.fd_step)

    def objective(self, theta, image) -> float:
        return composite_objective(theta, image, self.memory, self.reg,
                                   self.weights, self.quality_probe)

    def measures(self, image) -> np.ndarray:
        return np.array([contrastive_score(image, p) for p in self.measure_probes])

    def score(self, theta, image, with_gradients: bool = False) -> Evaluation:
        theta = as_float_vector(theta, "theta")
        f = self.objective(theta, image)
        m = require_finite(self.measures(image), "measures")
        if not with_gradients:
            return Evaluation(f=float(f), m=m, image=image)
        # one central-difference sweep renders each offset image once and
        # reads the objective and every measure from it
        k = len(self.measure_probes)
        grad_f = np.zeros_like(theta)
        grad_m = [np.zeros_like(theta) for _ in range(k)]
        for d in range(theta.shape[0]):
            step = np.zeros_like(theta)
            step[d] = self.fd_step
            img_hi = self.generator.image(theta + step)
            img_lo = self.generator.image(theta - step)
            f_hi = self.objective(theta + step, img_hi)
            f_lo = self.objective(theta - step, img_lo)
            if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
                raise EvaluationRejected("non-finite objective during finite differences")
            grad_f[d] = (f_hi - f_lo) / (2.0 * self.fd_step)
            m_hi = self.measures(img_hi)
            m_lo = self.measures(img_lo)
            for j in range(k):
                grad_m[j][d] = (m_hi[j] - m_lo[j]) / (2.0 * self.fd_step)
        return Evaluation(f=float(f), m=m, grad_f=grad_f, grad_m=grad_m, image=image)

    def remember(self, image) -> None:
        update_memory(self.memory, image)
