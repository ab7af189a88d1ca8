"""Grid archive over measure space with annealed acceptance thresholds.

The archive keeps two records per cell:

* an annealed acceptance threshold that ratchets toward accepted objective
  values at rate ``alpha`` and governs which solutions count as improvements,
* a passive elite, the best-ever solution seen for the cell regardless of the
  threshold, which is what gets exported.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, EvaluationRejected
from .validation import as_float_vector, require_finite


@dataclass(frozen=True)
class MeasureSpec:
    """Bounds and grid resolution of the measure space."""

    bounds: tuple[tuple[float, float], ...]
    resolution: tuple[int, ...]

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        resolution = tuple(int(r) for r in self.resolution)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "resolution", resolution)
        if len(bounds) != len(resolution):
            raise ConfigurationError("bounds and resolution must have equal length")
        if not bounds:
            raise ConfigurationError("measure space needs at least one dimension")
        for lo, hi in bounds:
            if not (lo < hi):
                raise ConfigurationError(f"invalid measure interval [{lo}, {hi}]")
        for r in resolution:
            if r < 1:
                raise ConfigurationError(f"resolution must be >= 1, got {r}")

    @property
    def k(self) -> int:
        return len(self.bounds)

    @property
    def total_cells(self) -> int:
        return int(np.prod(self.resolution))


def cell_index(m, spec: MeasureSpec) -> tuple[int, ...]:
    """Map a measure vector to its grid cell by uniform half-open binning.

    Values outside the bounds clamp to the boundary cell; the upper bound
    itself maps to the last cell.
    """
    m = as_float_vector(m, "measures")
    if m.shape[0] != spec.k:
        raise ConfigurationError(f"expected {spec.k} measures, got {m.shape[0]}")
    require_finite(m, "measures", EvaluationRejected)
    idx = []
    for value, (lo, hi), res in zip(m, spec.bounds, spec.resolution):
        j = int(math.floor((value - lo) / (hi - lo) * res))
        idx.append(min(max(j, 0), res - 1))
    return tuple(idx)


@dataclass
class Elite:
    """Best-ever occupant of a cell."""

    theta: np.ndarray
    f: float
    m: np.ndarray


@dataclass
class InsertResult:
    delta: float
    accepted: bool
    index: tuple[int, ...]


@dataclass
class ArchiveStats:
    coverage: float
    qd_score: float
    best_f: float
    occupied: int


@dataclass
class Archive:
    """Dense threshold grid plus a sparse map of passive elites."""

    spec: MeasureSpec
    alpha: float = 0.02
    min_f: float = 0.0
    thresholds: np.ndarray = field(init=False, repr=False)
    _elites: dict[int, Elite] = field(init=False, repr=False)

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        self.thresholds = np.full(self.spec.total_cells, float(self.min_f))
        self._elites = {}

    def _flat(self, index: tuple[int, ...]) -> int:
        flat = 0
        for j, res in zip(index, self.spec.resolution):
            flat = flat * res + j
        return flat

    def _unflat(self, flat: int) -> tuple[int, ...]:
        idx = []
        for res in reversed(self.spec.resolution):
            idx.append(flat % res)
            flat //= res
        return tuple(reversed(idx))

    def threshold_at(self, index: tuple[int, ...]) -> float:
        return float(self.thresholds[self._flat(index)])

    def improvement(self, f: float, m) -> float:
        """Objective value minus the target cell's threshold (no mutation)."""
        f = float(require_finite(f, "objective"))
        return f - self.threshold_at(cell_index(m, self.spec))

    def insert(self, theta, f: float, m) -> InsertResult:
        """Offer a solution to the archive.

        Acceptance (f strictly above the cell threshold) anneals the
        threshold; the passive elite updates on any strict best-f improvement,
        independent of acceptance.
        """
        f = float(require_finite(f, "objective"))
        theta = as_float_vector(theta, "theta")
        index = cell_index(m, self.spec)
        flat = self._flat(index)
        old = float(self.thresholds[flat])
        delta = f - old
        accepted = f > old
        if accepted:
            self.thresholds[flat] = (1.0 - self.alpha) * old + self.alpha * f
        elite = self._elites.get(flat)
        if elite is None or f > elite.f:
            self._elites[flat] = Elite(theta=theta.copy(), f=f,
                                       m=as_float_vector(m, "measures").copy())
        return InsertResult(delta=delta, accepted=accepted, index=index)

    @property
    def occupied(self) -> int:
        return len(self._elites)

    def elites(self) -> list[tuple[tuple[int, ...], Elite]]:
        """Occupied cells in row-major cell order."""
        return [(self._unflat(flat), self._elites[flat])
                for flat in sorted(self._elites)]

    def sample_elite(self, rng: np.random.Generator) -> Elite:
        if not self._elites:
            raise ConfigurationError("cannot sample from an empty archive")
        keys = sorted(self._elites)
        return self._elites[keys[rng.integers(len(keys))]]

    def stats(self) -> ArchiveStats:
        fs = [e.f for e in self._elites.values()]
        return ArchiveStats(
            coverage=len(fs) / self.spec.total_cells,
            qd_score=float(sum(fs)),
            best_f=float(max(fs)) if fs else float("nan"),
            occupied=len(fs),
        )

    def to_records(self) -> list[dict]:
        records = []
        for index, elite in self.elites():
            records.append({
                "cell": list(index),
                "f": elite.f,
                "m": [float(v) for v in elite.m],
                "theta": [float(v) for v in elite.theta],
            })
        return records

    def export_jsonl(self, path) -> Path:
        """One JSON record per occupied cell, row-major cell order."""
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for record in self.to_records():
                fh.write(json.dumps(record) + "\n")
        return path


def merge(archives: Sequence[Archive] | Iterable[Archive]) -> Archive:
    """Merge passive elites across trials, keeping the max-f elite per cell.

    Thresholds of the result are reset to min_f: the merged archive is a
    passive container, not a resumed optimization state.
    """
    archives = list(archives)
    if not archives:
        raise ConfigurationError("merge requires at least one archive")
    spec = archives[0].spec
    for other in archives[1:]:
        if other.spec != spec:
            raise ConfigurationError("cannot merge archives with different measure specs")
    merged = Archive(spec=spec, alpha=archives[0].alpha, min_f=archives[0].min_f)
    for archive in archives:
        for flat, elite in archive._elites.items():
            current = merged._elites.get(flat)
            if current is None or elite.f > current.f:
                merged._elites[flat] = Elite(theta=elite.theta.copy(), f=elite.f,
                                             m=elite.m.copy())
    return merged
