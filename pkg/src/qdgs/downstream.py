"""Downstream shape classifier and the bias-repair experiment harness.

The classifier is a two-layer perceptron (flattened 32x32 RGB input, 64
rectified hidden units, two-class softmax) trained by mini-batch SGD with
hand-written backpropagation, so loss gradients stay inspectable and every
run is reproducible from its seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import ConfigurationError
from .shapes import MINORITY_GROUPS, RealDataset, group_name

INPUT_SIZE = 32
INPUT_DIM = INPUT_SIZE * INPUT_SIZE * 3
GROUPS = ("red_triangle", "blue_triangle", "red_square", "blue_square")


def prepare_images(images: np.ndarray) -> np.ndarray:
    """Flatten (n, 32, 32, 3) image batches into float64 design matrices."""
    arr = np.asarray(images, dtype=float)
    if arr.ndim == 2:
        if arr.shape[1] != INPUT_DIM:
            raise ConfigurationError(f"expected {INPUT_DIM} features, got {arr.shape[1]}")
        return arr
    if arr.ndim != 4 or arr.shape[1] != INPUT_SIZE or arr.shape[2] != INPUT_SIZE:
        raise ConfigurationError(
            f"expected (n, {INPUT_SIZE}, {INPUT_SIZE}, 3) images, got {arr.shape}")
    return arr.reshape(arr.shape[0], -1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class ShapeClassifier(BaseEstimator, ClassifierMixin):
    """Two-layer perceptron with from-scratch SGD training."""

    def __init__(self, hidden: int = 64, epochs: int = 30, lr: float = 0.05,
                 batch: int = 64, seed: int = 0):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.batch = batch
        self.seed = seed

    # -- internals ---------------------------------------------------------

    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        h = self.hidden
        self.w1_ = rng.standard_normal((INPUT_DIM, h)) * math.sqrt(2.0 / INPUT_DIM)
        self.b1_ = np.zeros(h)
        self.w2_ = rng.standard_normal((h, 2)) * math.sqrt(2.0 / h)
        self.b2_ = np.zeros(2)
        self.classes_ = np.array([0, 1])
        self.loss_curve_ = []

    def _forward(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        hidden = np.maximum(X @ self.w1_ + self.b1_, 0.0)
        return hidden, hidden @ self.w2_ + self.b2_

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray):
        """Mean cross-entropy and its gradients for one batch."""
        n = len(X)
        hidden, logits = self._forward(X)
        probs = _softmax(logits)
        loss = float(-np.log(probs[np.arange(n), y] + 1e-300).mean())
        d_logits = probs.copy()
        d_logits[np.arange(n), y] -= 1.0
        d_logits /= n
        grads = {
            "w2": hidden.T @ d_logits,
            "b2": d_logits.sum(axis=0),
        }
        d_hidden = d_logits @ self.w2_.T
        d_hidden[hidden <= 0.0] = 0.0
        grads["w1"] = X.T @ d_hidden
        grads["b1"] = d_hidden.sum(axis=0)
        return loss, grads

    def _sgd(self, X: np.ndarray, y: np.ndarray, epochs: int, lr: float,
             rng: np.random.Generator):
        n = len(X)
        for _ in range(epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            batches = 0
            for start in range(0, n, self.batch):
                idx = order[start:start + self.batch]
                loss, grads = self.loss_and_grads(X[idx], y[idx])
                self.w1_ -= lr * grads["w1"]
                self.b1_ -= lr * grads["b1"]
                self.w2_ -= lr * grads["w2"]
                self.b2_ -= lr * grads["b2"]
                epoch_loss += loss
                batches += 1
            self.loss_curve_.append(epoch_loss / max(batches, 1))

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y):
        X = prepare_images(X)
        y = np.asarray(y, dtype=int)
        if len(np.unique(y)) < 2:
            raise ConfigurationError("training data must contain both classes")
        self._init_params()
        self._sgd(X, y, self.epochs, self.lr, np.random.default_rng(self.seed + 1))
        return self

    def finetune(self, X, y, epochs: int = 10, lr: float = 0.05):
        """Continue SGD from the current weights on a new dataset."""
        if not hasattr(self, "w1_"):
            raise ConfigurationError("finetune requires a fitted classifier")
        X = prepare_images(X)
        y = np.asarray(y, dtype=int)
        self._sgd(X, y, epochs, lr, np.random.default_rng(self.seed + 2))
        return self

    def predict_proba(self, X) -> np.ndarray:
        _, logits = self._forward(prepare_images(X))
        return _softmax(logits)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y) -> float:
        return float((self.predict(X) == np.asarray(y, dtype=int)).mean())

    # -- persistence -------------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        np.savez(path, w1=self.w1_, b1=self.b1_, w2=self.w2_, b2=self.b2_,
                 loss_curve=np.array(self.loss_curve_),
                 config=np.array([self.hidden, self.epochs, self.lr,
                                  self.batch, self.seed]))
        return path

    @classmethod
    def load(cls, path) -> "ShapeClassifier":
        data = np.load(Path(path))
        hidden, epochs, lr, batch, seed = data["config"]
        model = cls(hidden=int(hidden), epochs=int(epochs), lr=float(lr),
                    batch=int(batch), seed=int(seed))
        model.w1_ = data["w1"]
        model.b1_ = data["b1"]
        model.w2_ = data["w2"]
        model.b2_ = data["b2"]
        model.loss_curve_ = list(data["loss_curve"])
        model.classes_ = np.array([0, 1])
        return model


def train(dataset: RealDataset | tuple, epochs: int = 30, lr: float = 0.05,
          batch: int = 64, seed: int = 0) -> ShapeClassifier:
    X, y = _unpack(dataset)
    model = ShapeClassifier(epochs=epochs, lr=lr, batch=batch, seed=seed)
    return model.fit(X, y)


def finetune(model: ShapeClassifier, dataset: RealDataset | tuple,
             epochs: int = 10, lr: float = 0.05) -> ShapeClassifier:
    X, y = _unpack(dataset)
    if epochs <= 0:
        return model
    return model.finetune(X, y, epochs=epochs, lr=lr)


def _unpack(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, RealDataset):
        return dataset.images, dataset.shape_labels
    X, y = dataset
    return np.asarray(X), np.asarray(y, dtype=int)


@dataclass
class EvalReport:
    per_group_accuracy: dict[str, float]
    overall_accuracy: float
    minority_mean: float
    di: float


def evaluate(model: ShapeClassifier, X, y, groups: Sequence[str]) -> EvalReport:
    """Per-group accuracies over the four color/shape combinations.

    Minority combinations are blue triangles and red squares; the disparate
    impact ratio is min over present groups divided by max.
    """
    X = prepare_images(X)
    y = np.asarray(y, dtype=int)
    groups = np.asarray(groups)
    pred = model.predict(X)
    correct = pred == y
    per_group: dict[str, float] = {}
    for g in GROUPS:
        mask = groups == g
        if mask.any():
            per_group[g] = float(correct[mask].mean())
    overall = float(correct.mean())
    minority = [per_group[g] for g in MINORITY_GROUPS if g in per_group]
    minority_mean = float(np.mean(minority)) if minority else float("nan")
    accs = list(per_group.values())
    di = float(min(accs) / max(accs)) if accs and max(accs) > 0 else 0.0
    return EvalReport(per_group_accuracy=per_group, overall_accuracy=overall,
                      minority_mean=minority_mean, di=di)


def evaluate_on_dataset(model: ShapeClassifier, dataset: RealDataset) -> EvalReport:
    return evaluate(model, dataset.images, dataset.shape_labels,
                    dataset.group_names)


# ---------------------------------------------------------------------------
# experiment sweep


@dataclass
class SweepRow:
    b: float
    method: str
    seed: int
    per_group_accuracy: dict[str, float]
    overall: float
    minority_mean: float
    di: float


@dataclass
class SweepConfig:
    bias_levels: tuple[float, ...] = (0.80, 0.85, 0.90, 0.95, 0.98)
    methods: tuple[str, ...] = ("none", "random", "qdgs")
    seeds: int = 5
    train_size: int = 1500
    epochs: int = 30
    finetune_epochs: int = 10
    lr: float = 0.05
    batch: int = 64
    base_seed: int = 0


def experiment_sweep(config: SweepConfig, eval_set: RealDataset,
                     synthetic: dict[str, tuple[np.ndarray, np.ndarray]],
                     train_sets: dict[tuple[float, int], RealDataset]) -> list[SweepRow]:
    """Train on each biased real set, optionally fine-tune on a method's
    synthetic set, and evaluate on the balanced set.

    ``synthetic`` maps method name to (X, y); methods without a synthetic
    set are skipped with their cells marked absent (not emitted).
    """
    import copy

    rows: list[SweepRow] = []
    for b in config.bias_levels:
        for seed_idx in range(config.seeds):
            train_set = train_sets[(b, seed_idx)]
            cell_seed = config.base_seed + 1000 * seed_idx
            # the pretrained model is shared across methods of one cell:
            # fine-tuning starts from a copy, so results match training
            # each method from scratch with the same seed
            base_model = train(train_set, epochs=config.epochs, lr=config.lr,
                               batch=config.batch, seed=cell_seed)
            for method in config.methods:
                if method != "none" and method not in synthetic:
                    continue
                model = base_model if method == "none" else copy.deepcopy(base_model)
                if method != "none":
                    X_syn, y_syn = synthetic[method]
                    finetune(model, (X_syn, y_syn), epochs=config.finetune_epochs,
                             lr=config.lr)
                report = evaluate_on_dataset(model, eval_set)
                rows.append(SweepRow(b=b, method=method, seed=seed_idx,
                                     per_group_accuracy=report.per_group_accuracy,
                                     overall=report.overall_accuracy,
                                     minority_mean=report.minority_mean,
                                     di=report.di))
    return rows


RESULT_COLUMNS = ("b", "method", "seed", "acc_red_triangle", "acc_blue_triangle",
                  "acc_red_square", "acc_blue_square", "overall", "minority_mean", "di")


def write_results_csv(rows: Sequence[SweepRow], path) -> Path:
    path = Path(path)
    lines = [",".join(RESULT_COLUMNS)]
    for row in rows:
        accs = [row.per_group_accuracy.get(g, float("nan")) for g in GROUPS]
        lines.append(",".join([repr(row.b), row.method, str(row.seed)]
                              + [repr(a) for a in accs]
                              + [repr(row.overall), repr(row.minority_mean),
                                 repr(row.di)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_results_csv(path) -> list[SweepRow]:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        accs = {g: float(v) for g, v in zip(GROUPS, parts[3:7]) if v != "nan"}
        rows.append(SweepRow(b=float(parts[0]), method=parts[1], seed=int(parts[2]),
                             per_group_accuracy=accs, overall=float(parts[7]),
                             minority_mean=float(parts[8]), di=float(parts[9])))
    return rows


@dataclass
class AggregateRow:
    b: float
    method: str
    trials: int
    minority_mean: float
    minority_stderr: float
    overall: float
    overall_stderr: float
    di: float


def aggregate(rows: Sequence[SweepRow]) -> list[AggregateRow]:
    """Mean and standard error over seeds for each (b, method) cell."""
    cells: dict[tuple[float, str], list[SweepRow]] = {}
    for row in rows:
        cells.setdefault((row.b, row.method), []).append(row)
    out = []
    for (b, method) in sorted(cells):
        group = cells[(b, method)]
        minority = np.array([r.minority_mean for r in group])
        overall = np.array([r.overall for r in group])
        di = np.array([r.di for r in group])
        n = len(group)
        stderr = (lambda v: float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0)
        out.append(AggregateRow(b=b, method=method, trials=n,
                                minority_mean=float(minority.mean()),
                                minority_stderr=stderr(minority),
                                overall=float(overall.mean()),
                                overall_stderr=stderr(overall),
                                di=float(di.mean())))
    return out


def write_aggregate_csv(aggs: Sequence[AggregateRow], path) -> Path:
    path = Path(path)
    header = "b,method,trials,minority_mean,minority_stderr,overall,overall_stderr,di"
    lines = [header]
    for a in aggs:
        lines.append(f"{a.b!r},{a.method},{a.trials},{a.minority_mean!r},"
                     f"{a.minority_stderr!r},{a.overall!r},{a.overall_stderr!r},{a.di!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def render_markdown_table(aggs: Sequence[AggregateRow]) -> str:
    lines = ["| bias b | method | minority acc (mean +/- se) | overall | DI |",
             "|---|---|---|---|---|"]
    for a in aggs:
        lines.append(f"| {a.b:.2f} | {a.method} | {a.minority_mean:.3f} +/- "
                     f"{a.minority_stderr:.3f} | {a.overall:.3f} | {a.di:.3f} |")
    return "\n".join(lines) + "\n"
