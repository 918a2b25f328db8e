"""Tape-free reverse-mode differentiation over numpy arrays.

Only the handful of operators the toolkit's graphs need are provided:
dense matmul, broadcasting arithmetic, reductions, ReLU, softmax
cross-entropy, the concept soft-threshold and straight-through
Gumbel-Softmax. Every node stores a closure that pushes its output
gradient back to its parents.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")
    # make ndarray (op) Tensor defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = self.value + other.value

        def backward(g):
            self._accumulate(_unbroadcast(g, self.value.shape))
            other._accumulate(_unbroadcast(g, other.value.shape))

        return Tensor(out, _parents=(self, other), _backward=backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, _parents=(self,), _backward=lambda g: self._accumulate(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = self.value * other.value

        def backward(g):
            self._accumulate(_unbroadcast(g * other.value, self.value.shape))
            other._accumulate(_unbroadcast(g * self.value, other.value.shape))

        return Tensor(out, _parents=(self, other), _backward=backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = self.value / other.value

        def backward(g):
            self._accumulate(_unbroadcast(g / other.value, self.value.shape))
            other._accumulate(_unbroadcast(-g * out / other.value, other.value.shape))

        return Tensor(out, _parents=(self, other), _backward=backward)

    def __pow__(self, exponent):
        exponent = float(exponent)
        out = self.value**exponent

        def backward(g):
            self._accumulate(g * exponent * self.value ** (exponent - 1.0))

        return Tensor(out, _parents=(self,), _backward=backward)

    def __matmul__(self, other):
        other = as_tensor(other)
        out = self.value @ other.value

        def backward(g):
            self._accumulate(g @ other.value.T)
            other._accumulate(self.value.T @ g)

        return Tensor(out, _parents=(self, other), _backward=backward)

    @property
    def T(self):
        return Tensor(self.value.T, _parents=(self,), _backward=lambda g: self._accumulate(g.T))

    # reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.value.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.value.shape))

        return Tensor(out, _parents=(self,), _backward=backward)

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return Tensor(x.value * mask, _parents=(x,), _backward=lambda g: x._accumulate(g * mask))


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` given row logits."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(len(labels))
    loss = -log_p[rows, labels].mean()

    def backward(g):
        probs = np.exp(log_p)
        probs[rows, labels] -= 1.0
        logits._accumulate(g * probs / len(labels))

    return Tensor(loss, _parents=(logits,), _backward=backward)


def threshold_index(values, ratio):
    """Per-row position of the threshold element for a sparsity ratio.

    Returns ``(k, positions)`` where ``k`` is the number of concepts removed
    per row and ``positions[r]`` is the column of the k-th smallest absolute
    value in row ``r`` under a stable (|value|, index) sort, or -1 when k=0.
    """
    values = np.atleast_2d(values)
    m = values.shape[1]
    k = removed_count(ratio, m)
    if k == 0:
        return k, np.full(values.shape[0], -1, dtype=np.int64)
    order = np.argsort(np.abs(values), axis=1, kind="stable")
    return k, order[:, k - 1]


def removed_count(ratio, m):
    """Number of concepts a sparsity ratio removes from ``m``.

    Chosen so exactly ceil((1 - ratio) * m) concepts survive; for ratios
    where ratio * m is an integer this is ratio * m itself.
    """
    kept = int(np.ceil((1.0 - ratio) * m - 1e-9))
    return m - max(kept, 0)


def soft_threshold(x: Tensor, ratio, positions=None) -> Tensor:
    """Row-wise ``x_i * max(|x_i| - |x_t|, 0)`` with ``t`` the threshold element.

    The choice of ``t`` (a sort) carries no gradient; the threshold value
    itself does, through the fixed position. ``positions`` pins the
    threshold columns, which finite-difference checks use to hold the
    order statistic fixed.
    """
    values = x.value
    squeeze = values.ndim == 1
    v = np.atleast_2d(values)
    if positions is None:
        _, positions = threshold_index(v, ratio)
    positions = np.asarray(positions, dtype=np.int64)
    rows = np.arange(v.shape[0])
    has_t = positions >= 0
    thr = np.where(has_t, np.abs(v[rows, np.maximum(positions, 0)]), 0.0)[:, None]
    margin = np.abs(v) - thr
    active = margin > 0
    out = np.where(active, v * margin, 0.0)
    if squeeze:
        out = out[0]

    def backward(g):
        g2 = np.atleast_2d(g)
        grad = np.where(active, g2 * (margin + np.abs(v)), 0.0)
        pull = (g2 * v * active).sum(axis=1)
        sel = rows[has_t]
        cols = positions[has_t]
        grad[sel, cols] -= np.sign(v[sel, cols]) * pull[has_t]
        x._accumulate(grad[0] if squeeze else grad)

    return Tensor(out, _parents=(x,), _backward=backward)


def gumbel_softmax_st(logits: Tensor, temperature, noise) -> Tensor:
    """Straight-through Gumbel-Softmax over the last axis.

    Forward is the one-hot argmax of ``logits + noise``; backward is the
    Jacobian of the soft sample ``softmax((logits + noise) / temperature)``.
    """
    z = (logits.value + noise) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    soft = np.exp(z)
    soft /= soft.sum(axis=-1, keepdims=True)
    hard = np.zeros_like(soft)
    idx = np.argmax(logits.value + noise, axis=-1)
    np.put_along_axis(hard, np.expand_dims(idx, -1), 1.0, axis=-1)

    def backward(g):
        inner = (g * soft).sum(axis=-1, keepdims=True)
        logits._accumulate(soft * (g - inner) / temperature)

    return Tensor(hard, _parents=(logits,), _backward=backward)


def gumbel_softmax_soft(logits: Tensor, temperature, noise) -> Tensor:
    """The relaxed sample itself, built from primitive ops (no shortcut)."""
    z = (logits + noise) / temperature
    shift = z.value.max(axis=-1, keepdims=True)
    e = exp(z - shift)
    return e / e.sum(axis=-1, keepdims=True)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)
    return Tensor(out, _parents=(x,), _backward=lambda g: x._accumulate(g * out))
