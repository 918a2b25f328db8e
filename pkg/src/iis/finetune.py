"""Representation fine-tuning by simplified-IIS maximisation.

A trainable adapter sits on top of frozen stored embeddings and is trained
with the unweighted sum of two cross-entropies: the dense head ``h`` on the
adapted representation, and the sparse head ``g`` on the soft-thresholded
projection onto a learnable concept matrix ``C_l``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, cross_entropy_logits, relu, soft_threshold
from .datastore import EmbeddingDataset, write_matrix
from .errors import DivergenceError, UsageError
from .evaluator import HeadConfig, accuracy, compute_iis, train_head
from .numerics import OptimizerState, cosine_warmup_lr, make_rng, optimizer_step

log = logging.getLogger(__name__)

ADAPTERS = ("linear", "mlp")


@dataclass
class FinetuneConfig:
    ratio: float = 0.1
    n_concepts: int = 200
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 3e-4
    weight_decay: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_fraction: float = 0.1
    adapter: str = "linear"
    warm_start_dense: bool = True
    snapshot_epochs: tuple = ()
    frozen: tuple = ()  # parameter names held fixed, e.g. ("C_l",)
    divergence_factor: float = 10.0
    divergence_patience: int = 3
    seed: int = 0
    head: HeadConfig = field(default_factory=HeadConfig)

    def check(self):
        if not 0.0 <= self.ratio < 1.0:
            raise UsageError("sparsity ratio must lie in [0, 1)")
        if self.adapter not in ADAPTERS:
            raise UsageError(f"unknown adapter {self.adapter!r}")
        if self.n_concepts < 1 or self.epochs < 0:
            raise UsageError("need n_concepts >= 1 and epochs >= 0")


def init_adapter(kind, dim, rng):
    """Parameters of an adapter that starts as the exact identity map."""
    if kind == "linear":
        return {"A": np.eye(dim), "a": np.zeros(dim)}
    if kind == "mlp":
        # residual block with a zero output layer
        return {
            "W1": rng.standard_normal((dim, dim)) / math.sqrt(dim),
            "b1": np.zeros(dim),
            "W2": np.zeros((dim, dim)),
            "b2": np.zeros(dim),
        }
    raise UsageError(f"unknown adapter {kind!r}")


def adapter_forward(p: dict, x):
    """Apply adapter parameters (Tensors or arrays) to row vectors ``x``."""
    if "A" in p:
        return x @ p["A"] + p["a"]
    return x + relu(x @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]


def apply_adapter(params, x):
    p = {k: Tensor(v) for k, v in params.items() if k in ("A", "a", "W1", "b1", "W2", "b2")}
    return adapter_forward(p, Tensor(np.asarray(x, dtype=np.float64))).value


def joint_objective(p: dict, x, labels, ratio, positions=None):
    """Return ``(total, dense, sparse)`` loss Tensors for parameter Tensors ``p``."""
    z = adapter_forward(p, Tensor(x))
    dense = cross_entropy_logits(z @ p["W_h"] + p["b_h"], labels)
    sparse_in = soft_threshold(z @ p["C_l"], ratio, positions)
    sparse = cross_entropy_logits(sparse_in @ p["W_g"] + p["b_g"], labels)
    return dense + sparse, dense, sparse


def sparse_features(params, x, ratio):
    z = apply_adapter(params, x)
    return soft_threshold(Tensor(z @ params["C_l"]), ratio).value


def head_accuracies(params, data: EmbeddingDataset, ratio):
    z = apply_adapter(params, data.embeddings)
    dense = np.argmax(z @ params["W_h"] + params["b_h"], axis=1)
    feats = soft_threshold(Tensor(z @ params["C_l"]), ratio).value
    sparse = np.argmax(feats @ params["W_g"] + params["b_g"], axis=1)
    return float(np.mean(dense == data.labels)), float(np.mean(sparse == data.labels))


def _full_loss(params, data, ratio):
    p = {k: Tensor(v) for k, v in params.items()}
    total, _, _ = joint_objective(p, data.embeddings, data.labels, ratio)
    return float(total.value)


@dataclass
class FinetuneResult:
    params: dict
    trace: list
    snapshots: dict
    config: FinetuneConfig


def init_params(train: EmbeddingDataset, val: EmbeddingDataset, config: FinetuneConfig):
    rng = make_rng(config.seed)
    dim, n_classes = train.dim, train.n_classes
    params = init_adapter(config.adapter, dim, rng)
    params["C_l"] = rng.standard_normal((dim, config.n_concepts)) / math.sqrt(dim)
    if config.warm_start_dense:
        h = train_head(train.embeddings, train.labels, val.embeddings, val.labels, n_classes,
                       config.head.with_seed(config.seed))
        params["W_h"], params["b_h"] = h.W.copy(), h.b.copy()
    else:
        params["W_h"], params["b_h"] = np.zeros((dim, n_classes)), np.zeros(n_classes)
    params["W_g"] = np.zeros((config.n_concepts, n_classes))
    params["b_g"] = np.zeros(n_classes)
    return params


def finetune_iis(train: EmbeddingDataset, val: EmbeddingDataset, config: FinetuneConfig | None = None,
                 params=None) -> FinetuneResult:
    """Train adapter, ``C_l`` and both heads jointly.

    The dense head is warm-started from a linear probe on the frozen
    embeddings (it plays the role of the pre-trained prediction head); the
    concept matrix and sparse head start fresh. Epoch 0 of the trace is the
    state before any update.
    """
    config = config or FinetuneConfig()
    config.check()
    params = init_params(train, val, config) if params is None else {k: v.copy() for k, v in params.items()}
    rng = make_rng(config.seed + 1)
    state = OptimizerState(kind="adam", learning_rate=config.learning_rate, beta1=config.beta1,
                           beta2=config.beta2, weight_decay=config.weight_decay)
    snap_at = set(config.snapshot_epochs) | {0, config.epochs}
    snapshots = {}

    def record(epoch, loss):
        acc_d, acc_s = head_accuracies(params, val, config.ratio)
        trace.append({"epoch": epoch, "acc_dense": acc_d, "acc_sparse": acc_s,
                      "ratio": acc_s / acc_d if acc_d > 0 else float("nan"), "loss": loss})
        if epoch in snap_at:
            snapshots[epoch] = {k: v.copy() for k, v in params.items()}

    trace = []
    initial = _full_loss(params, train, config.ratio)
    record(0, initial)
    streak = 0
    n = train.n_samples
    for epoch in range(1, config.epochs + 1):
        state.learning_rate = cosine_warmup_lr(config.learning_rate, epoch - 1, config.epochs, config.warmup_fraction)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            p = {k: Tensor(v, requires_grad=k not in config.frozen) for k, v in params.items()}
            total, _, _ = joint_objective(p, train.embeddings[idx], train.labels[idx], config.ratio)
            total.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value))
                     for k, t in p.items() if k not in config.frozen}
            params = {**params, **optimizer_step({k: params[k] for k in grads}, grads, state)}
        loss = _full_loss(params, train, config.ratio)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", trace)
        streak = streak + 1 if loss > config.divergence_factor * initial else 0
        record(epoch, loss)
        if streak >= config.divergence_patience:
            raise DivergenceError(f"loss above {config.divergence_factor}x its initial value for "
                                  f"{streak} epochs", trace)
    return FinetuneResult(params, trace, snapshots, config)


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "acc_dense", "acc_sparse", "ratio"])
        for row in trace:
            w.writerow([row["epoch"], repr(row["acc_dense"]), repr(row["acc_sparse"]), repr(row["ratio"])])


def save_snapshot(params, directory, epoch):
    """One IISE matrix per parameter (vectors stored as 1 x n)."""
    paths = []
    for name, value in sorted(params.items()):
        path = directory / f"snapshot_e{epoch:04d}_{name}.iise"
        write_matrix(path, np.atleast_2d(value))
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# simplified vs original IIS


@dataclass
class AlignmentRow:
    epoch: int
    accuracy: float
    simplified_iis: float
    original_iis: float


def track_iis_alignment(snapshots: dict, train, val, library, schedule, ratio=0.1, mode="ascending",
                        head_config: HeadConfig | None = None, test=None):
    """Accuracy, simplified IIS and full IIS for each adapter snapshot.

    ``library`` is either a fixed :class:`ConceptLibrary` applied to the
    adapted embeddings or a callable that rebuilds one from the adapted
    training split. Heads are retrained per snapshot, so the epoch-0 row
    measures the untouched embeddings.
    """
    head_config = head_config or HeadConfig()
    held_out = test if test is not None else val
    rows = []
    for epoch in sorted(snapshots):
        params = snapshots[epoch]
        adapted = [d.with_embeddings(apply_adapter(params, d.embeddings)) for d in (train, val, held_out)]
        tr, va, te = adapted
        h = train_head(tr.embeddings, tr.labels, va.embeddings, va.labels, tr.n_classes, head_config)
        acc = accuracy(h, te.embeddings, te.labels)
        feats = [sparse_features(params, d.embeddings, ratio) for d in (train, val, held_out)]
        g = train_head(feats[0], tr.labels, feats[1], va.labels, tr.n_classes, head_config, "interpretation")
        simplified = accuracy(g, feats[2], te.labels) / acc if acc > 0 else float("nan")
        lib = library(tr) if callable(library) else library
        report = compute_iis(tr, va, lib, schedule, mode, head_config, test=te if test is not None else None)
        rows.append(AlignmentRow(int(epoch), acc, simplified, report.iis))
    return rows


def write_alignment_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "accuracy", "simplified_iis", "original_iis"])
        for r in rows:
            w.writerow([r.epoch, repr(r.accuracy), repr(r.simplified_iis), repr(r.original_iis)])


def config_to_dict(config: FinetuneConfig):
    d = asdict(config)
    d["snapshot_epochs"] = list(config.snapshot_epochs)
    d["frozen"] = list(config.frozen)
    d["head"]["learning_rates"] = list(config.head.learning_rates)
    return d
