"""End-to-end orchestration: the quality-diversity sampling loop, the random
baseline, multi-trial merging, identity labeling, variant augmentation, and
dataset export."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import shapes
from .archive import Archive, MeasureSpec, cell_index, merge
from .emitter import GradientEmitter, branch
from .errors import ConfigurationError, EvaluationRejected
from .scoring import ObjectiveWeights, Scorer, normalize_grads
from .validation import as_float_vector

MAX_FAILURE_FRACTION = 0.01


@dataclass(frozen=True)
class QdgsConfig:
    """Hyperparameters of one sampling run."""

    iterations: int = 7000
    learning_rate: float = 0.5
    population: int = 32
    branch_step: float = 0.5
    anneal: float = 0.02
    min_f: float = 0.0
    theta0: np.ndarray | None = None
    grid: MeasureSpec = MeasureSpec(bounds=((-1.0, 1.0), (-1.0, 1.0)),
                                    resolution=(100, 100))
    weights: ObjectiveWeights = ObjectiveWeights()
    trials: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.population < 2:
            raise ConfigurationError("population must be >= 2")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")


@dataclass
class LogRow:
    iteration: int
    coverage: float
    qd_score: float
    best_f: float
    restarts: int
    acceptances: int


@dataclass
class QdgsResult:
    archive: Archive
    log: list[LogRow]
    evaluations: int
    restarts: int
    failures: int


def _parallel_map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_qdgs(config: QdgsConfig, generator, scorer: Scorer,
             threads: int = 1) -> QdgsResult:
    """Run the branching QD loop for ``config.iterations`` iterations.

    Per iteration: evaluate the search point with gradients, insert it,
    branch lambda solutions from coefficient draws, evaluate them (values
    only), insert each in branch order, step the search point by ranked
    ascent, adapt the coefficient distribution, and restart on a stagnant
    archive. Branch evaluation is a parallel map over pure scorers; archive
    insertion happens serially in branch order, so results do not depend on
    the worker count.
    """
    theta0 = (np.zeros(generator.latent_dim) if config.theta0 is None
              else as_float_vector(config.theta0, "theta0"))
    rng = np.random.default_rng(config.seed)
    archive = Archive(spec=config.grid, alpha=config.anneal, min_f=config.min_f)
    emitter = GradientEmitter(theta0=theta0, k=config.grid.k,
                              eta=config.learning_rate, lam=config.population,
                              sigma_g=config.branch_step)
    log: list[LogRow] = []
    evaluations = 0
    failures = 0

    def check_failures():
        if evaluations and failures > MAX_FAILURE_FRACTION * evaluations and failures > 3:
            raise EvaluationRejected(
                f"scorer failed on {failures}/{evaluations} evaluations")

    for iteration in range(1, config.iterations + 1):
        acceptances = 0
        image = generator.image(emitter.theta)
        try:
            evaluation = scorer.score(emitter.theta, image, with_gradients=True)
            evaluations += 1
        except EvaluationRejected:
            evaluations += 1
            failures += 1
            check_failures()
            evaluation = None

        archive_changed = False
        grad_f = np.zeros_like(emitter.theta)
        grad_m = [np.zeros_like(emitter.theta) for _ in range(config.grid.k)]
        if evaluation is not None:
            grad_f, grad_m = normalize_grads(evaluation.grad_f, evaluation.grad_m)
            result = archive.insert(emitter.theta, evaluation.f, evaluation.m)
            if result.accepted:
                archive_changed = True
                acceptances += 1

        coeffs = emitter.sample_coeffs(rng)
        branches = [branch(emitter.theta, grad_f, grad_m, c) for c in coeffs]

        def evaluate_branch(theta_b):
            try:
                return scorer.score(theta_b, generator.image(theta_b))
            except EvaluationRejected:
                return None

        branch_evals = _parallel_map(evaluate_branch, branches, threads)
        evaluations += len(branches)
        deltas = np.full(len(branches), -np.inf)
        for i, (theta_b, ev) in enumerate(zip(branches, branch_evals)):
            if ev is None:
                failures += 1
                check_failures()
                continue
            result = archive.insert(theta_b, ev.f, ev.m)
            deltas[i] = result.delta
            if result.accepted:
                archive_changed = True
                acceptances += 1

        emitter.ranked_ascent(branches, deltas)
        healthy = True
        if archive_changed:
            healthy = emitter.adapt(coeffs, deltas)
        emitter.maybe_restart(archive_changed and healthy, archive, rng)

        if evaluation is not None:
            scorer.remember(image)
        stats = archive.stats()
        log.append(LogRow(iteration=iteration, coverage=stats.coverage,
                          qd_score=stats.qd_score, best_f=stats.best_f,
                          restarts=emitter.restarts, acceptances=acceptances))

    return QdgsResult(archive=archive, log=log, evaluations=evaluations,
                      restarts=emitter.restarts, failures=failures)


@dataclass
class RandomSample:
    theta: np.ndarray
    f: float
    m: np.ndarray


def run_random(n: int, generator, scorer: Scorer, seed: int = 0,
               threads: int = 1) -> list[RandomSample]:
    """Evaluate n prior draws; no archive, just the raw list."""
    rng = np.random.default_rng(seed)
    if n <= 0:
        return []
    thetas = generator.prior(n, rng)

    def evaluate(theta):
        try:
            ev = scorer.score(theta, generator.image(theta))
        except EvaluationRejected:
            return None
        return RandomSample(theta=np.asarray(theta, dtype=float), f=ev.f, m=ev.m)

    results = _parallel_map(evaluate, list(thetas), threads)
    return [r for r in results if r is not None]


def multi_trial(config: QdgsConfig, generator, scorer: Scorer,
                threads: int = 1) -> Archive:
    """Run ``config.trials`` independent runs (seed + trial index) and merge
    their passive elites."""
    archives = []
    for trial in range(config.trials):
        trial_scorer = scorer.fresh() if hasattr(scorer, "fresh") else scorer
        trial_config = replace(config, seed=config.seed + trial, trials=1)
        archives.append(run_qdgs(trial_config, generator, trial_scorer,
                                 threads=threads).archive)
    return merge(archives)


# ---------------------------------------------------------------------------
# identity labels: measure-space chunks, then k-means on theta within chunks


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Assignment ties break toward the lowest centroid index (argmin).
    Returns (centroids, labels).
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if not (1 <= k <= n):
        raise ConfigurationError(f"k must lie in [1, {n}], got {k}")
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j:] = points[rng.integers(n, size=k - j)]
            break
        centroids[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    labels = None
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    # final assignment against the final centroids, so every point is
    # provably nearest its own centroid
    dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return centroids, dists.argmin(axis=1)


CHUNK_GRID = (3, 3)


def assign_identity_labels(archive: Archive, seed: int = 0) -> list[tuple[tuple[int, int], int]]:
    """Identity label per elite: (chunk over first two measures, cluster id).

    Chunks split the archive's measure bounds into an equal-extent 3x3 grid;
    within each chunk, k-means on theta with k = max(1, floor(size / 2)).
    Returned list aligns with ``archive.elites()`` order.
    """
    elites = archive.elites()
    if not elites:
        raise ConfigurationError("cannot label an empty archive")
    chunk_spec = MeasureSpec(bounds=archive.spec.bounds[:2], resolution=CHUNK_GRID)
    chunk_of = [cell_index(elite.m[:2], chunk_spec) for _, elite in elites]
    rng = np.random.default_rng(seed)
    labels: list[tuple[tuple[int, int], int] | None] = [None] * len(elites)
    for ci in range(CHUNK_GRID[0]):
        for cj in range(CHUNK_GRID[1]):
            members = [i for i, c in enumerate(chunk_of) if c == (ci, cj)]
            if not members:
                continue
            k = max(1, len(members) // 2)
            thetas = np.stack([elites[i][1].theta for i in members])
            _, cluster = kmeans(thetas, k, rng)
            for local, i in enumerate(members):
                labels[i] = ((ci, cj), int(cluster[local]))
    return labels  # type: ignore[return-value]


def augment_variants(theta, dir_a, dir_b, delta: float) -> np.ndarray:
    """Nine lattice variants theta + i*delta*dir_a + j*delta*dir_b, i,j in {-1,0,1}.

    Row-major over (i, j); the original sits at index 4 (i = j = 0).
    """
    theta = as_float_vector(theta, "theta")
    dir_a = as_float_vector(dir_a, "dir_a")
    dir_b = as_float_vector(dir_b, "dir_b")
    if not np.any(dir_a) or not np.any(dir_b):
        raise ConfigurationError("augmentation directions must be non-zero")
    out = np.empty((9, theta.shape[0]))
    idx = 0
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            out[idx] = theta + i * delta * dir_a + j * delta * dir_b
            idx += 1
    return out


# ---------------------------------------------------------------------------
# dataset export


@dataclass
class DatasetRecord:
    theta: np.ndarray
    path: str
    label: str
    f: float
    m: np.ndarray
    cell: tuple[int, ...] | None
    identity: str | None = None


@dataclass
class SyntheticDataset:
    records: list[DatasetRecord]
    manifest_path: Path | None = None
    dropped_ambiguous: int = 0

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class SourceSolution:
    """Common export currency for archive elites and random samples."""

    theta: np.ndarray
    f: float
    m: np.ndarray
    cell: tuple[int, ...] | None = None


def archive_solutions(archive: Archive) -> list[SourceSolution]:
    return [SourceSolution(theta=e.theta, f=e.f, m=e.m, cell=index)
            for index, e in archive.elites()]


def random_solutions(samples: Sequence[RandomSample]) -> list[SourceSolution]:
    return [SourceSolution(theta=s.theta, f=s.f, m=s.m) for s in samples]


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def export_dataset(solutions: Sequence[SourceSolution], generator, out_dir,
                   resolution: int = 128, tau: float = 0.01,
                   identities: Sequence[str] | None = None,
                   augment_step: float = 0.0, threads: int = 1) -> SyntheticDataset:
    """Render solutions to PNGs plus a JSONL manifest.

    Class labels come from the stored second measure via ``label_from_m2``;
    ambiguous records are dropped. With ``augment_step`` > 0, each record
    additionally exports nine rotation/scale latent-walk variants sharing the
    parent's labels.
    """
    from PIL import Image

    if not solutions:
        raise ConfigurationError("nothing to export")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    export_gen = generator.at_resolution(resolution) if hasattr(generator, "at_resolution") else generator

    jobs = []
    dropped = 0
    for i, sol in enumerate(solutions):
        if len(sol.m) < 2:
            raise ConfigurationError("export needs two measures to label records")
        label = shapes.label_from_m2(float(sol.m[1]), tau=tau)
        if label == "ambiguous":
            dropped += 1
            continue
        identity = identities[i] if identities is not None else None
        variants = [sol.theta]
        if augment_step > 0.0:
            dir_a = np.zeros_like(sol.theta)
            dir_b = np.zeros_like(sol.theta)
            dir_a[3] = 1.0  # rotation coordinate
            dir_b[4] = 1.0  # scale coordinate
            variants = list(augment_variants(sol.theta, dir_a, dir_b, augment_step))
        for v, theta in enumerate(variants):
            suffix = f"_{v}" if len(variants) > 1 else ""
            name = f"{i:06d}{suffix}.png"
            jobs.append((name, theta, label, sol, identity))

    def do_render(job):
        name, theta, label, sol, identity = job
        image = export_gen.image(theta)
        Image.fromarray(_to_uint8(image), mode="RGB").save(out_dir / name)
        return DatasetRecord(theta=np.asarray(theta, dtype=float), path=name,
                             label=label, f=sol.f, m=sol.m,
                             cell=sol.cell, identity=identity)

    records = _parallel_map(do_render, jobs, threads)
    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "path": rec.path,
                "label": rec.label,
                "identity": rec.identity,
                "f": rec.f,
                "m": [float(v) for v in rec.m],
                "theta": [float(v) for v in rec.theta],
                "cell": list(rec.cell) if rec.cell is not None else None,
            }) + "\n")
    return SyntheticDataset(records=records, manifest_path=manifest,
                            dropped_ambiguous=dropped)


def load_manifest(path) -> list[DatasetRecord]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            data = json.loads(line)
            records.append(DatasetRecord(
                theta=np.asarray(data["theta"], dtype=float), path=data["path"],
                label=data["label"], f=float(data["f"]),
                m=np.asarray(data["m"], dtype=float),
                cell=tuple(data["cell"]) if data.get("cell") else None,
                identity=data.get("identity")))
    return records


# ---------------------------------------------------------------------------
# density maps


def density_map(measures: np.ndarray, spec: MeasureSpec) -> np.ndarray:
    """Per-cell visit frequencies over the measure grid (sums to 1)."""
    if spec.k != 2:
        raise ConfigurationError("density maps are 2-D")
    counts = np.zeros(spec.resolution)
    measures = np.atleast_2d(np.asarray(measures, dtype=float))
    for m in measures:
        counts[cell_index(m, spec)] += 1.0
    total = counts.sum()
    return counts / total if total > 0 else counts


def measures_of(source) -> np.ndarray:
    """Measure matrix from an Archive, solutions, or samples."""
    if isinstance(source, Archive):
        return np.array([e.m for _, e in source.elites()])
    return np.array([s.m for s in source])


def write_density_csv(freq: np.ndarray, path) -> Path:
    path = Path(path)
    lines = [",".join(repr(float(v)) for v in row) for row in freq]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_run_log_csv(log: Sequence[LogRow], path) -> Path:
    path = Path(path)
    header = "iteration,coverage,qd_score,best_f,restarts,acceptances"
    lines = [header]
    for row in log:
        lines.append(f"{row.iteration},{row.coverage!r},{row.qd_score!r},"
                     f"{row.best_f!r},{row.restarts},{row.acceptances}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# estimator-style wrappers


class QdgsSampler(BaseEstimator):
    """Estimator-style front end for the QD sampling loop.

    ``fit`` runs the (multi-trial) search against the configured generator
    and scorer; the merged archive lands in ``archive_`` and per-iteration
    logs in ``log_``.
    """

    def __init__(self, generator=None, scorer=None, iterations: int = 1000,
                 learning_rate: float = 0.5, population: int = 32,
                 branch_step: float = 0.5, anneal: float = 0.02,
                 min_f: float = 0.0, grid_bounds=((-1.0, 1.0), (-1.0, 1.0)),
                 grid_resolution=(100, 100), trials: int = 1, seed: int = 0,
                 threads: int = 1):
        self.generator = generator
        self.scorer = scorer
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.population = population
        self.branch_step = branch_step
        self.anneal = anneal
        self.min_f = min_f
        self.grid_bounds = grid_bounds
        self.grid_resolution = grid_resolution
        self.trials = trials
        self.seed = seed
        self.threads = threads

    def _config(self) -> QdgsConfig:
        grid = MeasureSpec(bounds=tuple(tuple(b) for b in self.grid_bounds),
                           resolution=tuple(self.grid_resolution))
        return QdgsConfig(iterations=self.iterations, learning_rate=self.learning_rate,
                          population=self.population, branch_step=self.branch_step,
                          anneal=self.anneal, min_f=self.min_f, grid=grid,
                          trials=self.trials, seed=self.seed)

    def fit(self, X=None, y=None):
        if self.generator is None or self.scorer is None:
            raise ConfigurationError("QdgsSampler needs a generator and a scorer")
        config = self._config()
        if self.trials == 1:
            result = run_qdgs(config, self.generator, self.scorer, threads=self.threads)
            self.archive_ = result.archive
            self.log_ = result.log
            self.evaluations_ = result.evaluations
            self.restarts_ = result.restarts
        else:
            self.archive_ = multi_trial(config, self.generator, self.scorer,
                                        threads=self.threads)
            self.log_ = []
            self.evaluations_ = config.trials * config.iterations * (config.population + 1)
            self.restarts_ = 0
        return self

    def solutions(self) -> list[SourceSolution]:
        return archive_solutions(self.archive_)


class RandomSampler(BaseEstimator):
    """Estimator-style front end for the random-sampling baseline."""

    def __init__(self, generator=None, scorer=None, n: int = 1000, seed: int = 0,
                 threads: int = 1):
        self.generator = generator
        self.scorer = scorer
        self.n = n
        self.seed = seed
        self.threads = threads

    def fit(self, X=None, y=None):
        if self.generator is None or self.scorer is None:
            raise ConfigurationError("RandomSampler needs a generator and a scorer")
        self.samples_ = run_random(self.n, self.generator, self.scorer,
                                   seed=self.seed, threads=self.threads)
        return self

    def solutions(self) -> list[SourceSolution]:
        return random_solutions(self.samples_)
