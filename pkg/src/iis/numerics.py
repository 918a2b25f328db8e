"""Small numeric toolkit: softmax/cross-entropy, seeded randomness,
optimizers, learning-rate schedules and a finite-difference checker.

All arithmetic runs in float64. Randomness always flows through an
explicit :func:`make_rng` generator (Philox, counter based).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .autodiff import gumbel_softmax_st as _gumbel_st_op
from .errors import NumericError, UsageError

PROB_FLOOR = 1e-12


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(base, index) -> int:
    return (int(base) ^ int(index)) & 0xFFFFFFFFFFFFFFFF


def check_finite(values, what="values"):
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}")
    return arr


def softmax(logits):
    """Softmax over the last axis."""
    z = check_finite(logits, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probabilities, label) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    if not 0 <= int(label) < p.shape[-1]:
        raise UsageError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-math.log(max(float(p[int(label)]), PROB_FLOOR)))


# optimizers ---------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "sgd"
    learning_rate: float = 0.01
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise UsageError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate >= 0:
            raise UsageError("learning rate must be nonnegative")


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """One update of every named parameter; returns fresh arrays.

    ``weight_decay`` is decoupled (AdamW style) for Adam and L2-coupled for
    SGD. ``state.step_count`` advances by one per call.
    """
    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate
    new = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise UsageError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if state.kind == "sgd":
            if state.weight_decay:
                g = g + state.weight_decay * p
            if state.momentum:
                buf = state.buffers.get((name, "v"))
                buf = g.copy() if buf is None else state.momentum * buf + g
                state.buffers[(name, "v")] = buf
                g = buf
            new[name] = p - lr * g
        else:
            m = state.buffers.get((name, "m"), np.zeros_like(p))
            v = state.buffers.get((name, "v"), np.zeros_like(p))
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.buffers[(name, "m")] = m
            state.buffers[(name, "v")] = v
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            updated = p - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
            if state.weight_decay:
                updated = updated - lr * state.weight_decay * p
            new[name] = updated
    return new


def exponential_lr(base, epoch, gamma=0.99):
    return base * gamma**epoch


def cosine_warmup_lr(base, epoch, total_epochs, warmup_fraction=0.1):
    warmup = int(round(warmup_fraction * total_epochs))
    if epoch < warmup:
        return base * (epoch + 1) / warmup
    span = max(total_epochs - warmup, 1)
    return 0.5 * base * (1.0 + math.cos(math.pi * (epoch - warmup) / span))


# checking -----------------------------------------------------------------


def finite_difference_check(function, point, epsilon=1e-6) -> float:
    """Compare reverse-mode and central-difference gradients.

    ``function`` maps a leaf :class:`Tensor` to a scalar Tensor. Returns the
    maximum over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise UsageError("epsilon must lie in [1e-7, 1e-3]")
    point = np.array(point, dtype=np.float64)
    leaf = Tensor(point, requires_grad=True)
    out = function(leaf)
    check_finite(out.value, "function value")
    out.backward()
    analytic = np.zeros_like(point) if leaf.grad is None else leaf.grad

    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up = float(function(Tensor(point)).value)
        flat[i] = orig - epsilon
        down = float(function(Tensor(point)).value)
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError("non-finite evaluation during finite differences")
        numeric.reshape(-1)[i] = (up - down) / (2.0 * epsilon)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# Gumbel -------------------------------------------------------------------


def sample_gumbel(shape, rng: np.random.Generator):
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))


def gumbel_softmax_st(logits, temperature, rng: np.random.Generator, noise=None) -> Tensor:
    """Straight-through Gumbel-Softmax sample over the last axis.

    Returns a Tensor whose value is exactly one-hot and whose backward pass
    follows the soft relaxation at ``temperature``.
    """
    if not temperature > 0:
        raise UsageError("temperature must be positive")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if noise is None:
        noise = sample_gumbel(logits.shape, rng)
    return _gumbel_st_op(logits, temperature, noise)
