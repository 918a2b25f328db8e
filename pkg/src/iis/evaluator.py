"""Linear heads, accuracy, ARR and the Inherent Interpretability Score.

IIS is estimated from a finite sparsity schedule: one interpretation head
per ratio, ARR = interpretation accuracy / representation accuracy, and the
trapezoid area under (ratio, ARR) divided by the sampled span, so the
score reads as a mean ARR over the schedule.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, cross_entropy_logits
from .datastore import (
    FORMAT_VERSION,
    ConceptLibrary,
    EmbeddingDataset,
    IISReport,
    SparsitySchedule,
    _check_header,
    _read_json,
    dump_json,
    trapezoid_mean,
)
from .errors import DataError, NumericError, UsageError
from .interpret import canonical_mode, cluster_concepts, interpret_matrix, pool_groups, project, sparsify_matrix
from .numerics import OptimizerState, derive_seed, exponential_lr, make_rng, optimizer_step

log = logging.getLogger(__name__)

VISUAL_SCHEDULE = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.98)
# concept count of the reference library -> its ratio set
TEXT_SCHEDULES = {
    4751: (0.0, 0.9, 0.99, 0.995, 0.997, 0.999),
    370: (0.0, 0.5, 0.7, 0.9, 0.99, 0.995),
    143: (0.0, 0.5, 0.7, 0.9, 0.95, 0.97),
    892: (0.0, 0.5, 0.7, 0.9, 0.95, 0.97),
}
PRESETS = {
    "visual": VISUAL_SCHEDULE,
    "text-imagenet": TEXT_SCHEDULES[4751],
    "text-cub": TEXT_SCHEDULES[370],
    "text-cifar": TEXT_SCHEDULES[143],
}


def text_schedule_for(m):
    """Ratio set of the reference text library closest in (log) concept count."""
    ref = min(TEXT_SCHEDULES, key=lambda c: (abs(math.log(c) - math.log(max(m, 1))), c))
    return SparsitySchedule(TEXT_SCHEDULES[ref])


def preset_schedule(name, m=None):
    if name == "text":
        if m is None:
            raise UsageError("the 'text' preset needs the library size")
        return text_schedule_for(m)
    if name not in PRESETS:
        raise UsageError(f"unknown schedule preset {name!r}; choose from visual, text, {', '.join(PRESETS)}")
    return SparsitySchedule(PRESETS[name])


# ---------------------------------------------------------------------------
# heads


@dataclass
class HeadConfig:
    learning_rates: tuple = (0.1, 0.01, 0.001)
    epochs: int = 30
    batch_size: int = 256
    optimizer: str = "sgd"
    scheduler: str | None = None  # None or "exp"
    decay: float = 0.99
    momentum: float = 0.0
    standardize: bool = True
    seed: int = 0

    def with_seed(self, seed):
        d = asdict(self)
        d["seed"] = int(seed)
        return HeadConfig(**d)


@dataclass
class LinearHead:
    W: np.ndarray
    b: np.ndarray
    input_kind: str = "representation"
    config: dict = field(default_factory=dict)
    learning_rate: float | None = None
    val_accuracy: float | None = None

    def logits(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.W.shape[0]:
            raise DataError(f"features have dimension {x.shape[-1]}, head expects {self.W.shape[0]}")
        return x @ self.W + self.b

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)


def head_loss(w: Tensor, b: Tensor, x, labels) -> Tensor:
    return cross_entropy_logits(Tensor(x) @ w + b, labels)


def _fit_one(x, y, n_classes, lr, config: HeadConfig):
    rng = make_rng(config.seed)
    params = {"W": np.zeros((x.shape[1], n_classes)), "b": np.zeros(n_classes)}
    state = OptimizerState(kind=config.optimizer, learning_rate=lr, momentum=config.momentum)
    n = x.shape[0]
    for epoch in range(config.epochs):
        if config.scheduler == "exp":
            state.learning_rate = exponential_lr(lr, epoch, config.decay)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            w = Tensor(params["W"], requires_grad=True)
            b = Tensor(params["b"], requires_grad=True)
            loss = head_loss(w, b, x[idx], y[idx])
            if not math.isfinite(float(loss.value)):
                return None
            loss.backward()
            params = optimizer_step(params, {"W": w.grad, "b": b.grad}, state)
    if not (np.all(np.isfinite(params["W"])) and np.all(np.isfinite(params["b"]))):
        return None
    return params


def train_head(train_x, train_y, val_x, val_y, n_classes, config: HeadConfig | None = None,
               input_kind="representation") -> LinearHead:
    """Softmax regression with learning-rate selection on validation accuracy.

    Features are standardised with training statistics while fitting and
    the affine map is folded back into ``W`` and ``b``, so the returned head
    acts on the raw features.
    """
    config = config or HeadConfig()
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    missing = sorted(set(range(n_classes)) - set(np.unique(train_y).tolist()))
    if missing:
        raise DataError(f"classes {missing} are absent from the training split")
    if config.standardize:
        mu = train_x.mean(axis=0)
        sd = train_x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
    else:
        mu, sd = np.zeros(train_x.shape[1]), np.ones(train_x.shape[1])
    xs = (train_x - mu) / sd

    best = None
    for lr in config.learning_rates:
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected below
            params = _fit_one(xs, train_y, n_classes, lr, config)
        if params is None:
            log.warning("head training diverged at lr=%g; skipping", lr)
            continue
        w = params["W"] / sd[:, None]
        b = params["b"] - (mu / sd) @ params["W"]
        head = LinearHead(w, b, input_kind, asdict(config), lr)
        head.val_accuracy = accuracy(head, val_x, val_y)
        if best is None or head.val_accuracy > best.val_accuracy:
            best = head
    if best is None:
        raise NumericError("head training diverged at every learning rate")
    return best


def accuracy(head: LinearHead, x, y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise DataError("accuracy of an empty split is undefined")
    return float(np.mean(head.predict(x) == y))


def arr(interp_acc, repr_acc) -> float:
    if repr_acc <= 0:
        raise NumericError("representation accuracy is zero; ARR is undefined")
    return interp_acc / repr_acc


def iis_from_curve(ratios, arr_values) -> float:
    pairs = sorted(zip(ratios, arr_values))
    if len(pairs) < 2:
        raise UsageError("IIS needs at least 2 sparsity ratios")
    xs, ys = zip(*pairs)
    return trapezoid_mean(xs, ys)


def save_head(head: LinearHead, path):
    dump_json(
        {
            "format": "iis-head",
            "version": FORMAT_VERSION,
            "input_kind": head.input_kind,
            "learning_rate": head.learning_rate,
            "val_accuracy": head.val_accuracy,
            "config": head.config,
            "W": head.W.tolist(),
            "b": head.b.tolist(),
        },
        path,
    )


def load_head(path) -> LinearHead:
    d = _read_json(Path(path))
    _check_header(d, "iis-head")
    w = np.asarray(d["W"], dtype=np.float64)
    b = np.asarray(d["b"], dtype=np.float64)
    if w.ndim != 2 or b.shape != (w.shape[1],):
        raise DataError(f"{path}: malformed head parameters")
    return LinearHead(w, b, d["input_kind"], d.get("config", {}), d.get("learning_rate"), d.get("val_accuracy"))


# ---------------------------------------------------------------------------
# IIS


def _eval_split(val, test):
    return (test, False) if test is not None else (val, True)


def _interpret_splits(splits, library, ratio, mode, seed):
    if mode == "clustering":
        groups, k = cluster_concepts(library, ratio, seed)
        return [pool_groups(project(d.embeddings, library), groups, k) for d in splits]
    return [sparsify_matrix(project(d.embeddings, library), ratio, mode) for d in splits]


def compute_iis(
    train: EmbeddingDataset,
    val: EmbeddingDataset,
    library: ConceptLibrary,
    schedule: SparsitySchedule,
    mode="ascending",
    config: HeadConfig | None = None,
    test: EmbeddingDataset | None = None,
    jobs=1,
) -> IISReport:
    config = config or HeadConfig()
    mode = canonical_mode(mode)
    if not isinstance(schedule, SparsitySchedule):
        schedule = SparsitySchedule(schedule)
    held_out, val_as_test = _eval_split(val, test)
    n_classes = train.n_classes

    h = train_head(train.embeddings, train.labels, val.embeddings, val.labels, n_classes, config)
    repr_acc = accuracy(h, held_out.embeddings, held_out.labels)

    def one_ratio(item):
        i, ratio = item
        seed = derive_seed(config.seed, i)
        ftr, fval, fout = _interpret_splits((train, val, held_out), library, ratio, mode, seed)
        g = train_head(ftr, train.labels, fval, val.labels, n_classes, config.with_seed(seed), "interpretation")
        return accuracy(g, fout, held_out.labels), ftr.shape[1], g.learning_rate

    items = list(enumerate(schedule.ratios))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one_ratio, items))
    else:
        results = [one_ratio(it) for it in items]

    interp = [r[0] for r in results]
    arrs = [arr(a, repr_acc) for a in interp]
    return IISReport(
        representation_accuracy=repr_acc,
        interpretation_accuracies=interp,
        arr=arrs,
        iis=trapezoid_mean(schedule.ratios, arrs),
        schedule=schedule,
        library_id=library.library_id,
        mode=mode,
        extras={
            "n_concepts": library.size,
            "feature_dims": [r[1] for r in results],
            "head_learning_rates": {"representation": h.learning_rate, "interpretation": [r[2] for r in results]},
            "eval_split": held_out.split,
            "val_as_test": val_as_test,
            "seed": config.seed,
        },
    )


# ---------------------------------------------------------------------------
# concept-class contributions


@dataclass
class ContributionResult:
    matrix: np.ndarray  # M x N
    entropy: np.ndarray  # N
    empty_classes: list
    names: list

    def to_dict(self):
        def clean(v):
            return None if not math.isfinite(v) else float(v)

        return {
            "concepts": self.names,
            "matrix": [[clean(v) for v in row] for row in self.matrix],
            "entropy": [clean(v) for v in self.entropy],
            "empty_classes": self.empty_classes,
        }


def contribution_entropy(column):
    """Shannon entropy (nats) of absolute contributions normalised to sum 1."""
    a = np.abs(np.asarray(column, dtype=np.float64))
    total = a.sum()
    if not np.isfinite(total) or total == 0:
        return float("nan")
    p = a[a > 0] / total
    return float(-(p * np.log(p)).sum())


def contribution_matrix(dataset: EmbeddingDataset, library, head: LinearHead, ratio, mode="ascending",
                        seed=0) -> ContributionResult:
    feats, names = interpret_matrix(dataset.embeddings, library, ratio, mode, seed)
    if feats.shape[1] != head.W.shape[0]:
        raise DataError("head input dimension does not match the interpretation")
    n = head.W.shape[1]
    out = np.full((feats.shape[1], n), np.nan)
    empty = []
    for k in range(n):
        members = dataset.labels == k
        if not members.any():
            empty.append(k)
            continue
        out[:, k] = feats[members].mean(axis=0) * head.W[:, k]
    entropy = np.array([contribution_entropy(out[:, k]) for k in range(n)])
    return ContributionResult(out, entropy, empty, names)
