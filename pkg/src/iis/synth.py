"""Synthetic corpora with a known interpretable fraction, and brute-force
reference implementations used to cross-check the fast paths.

Class means are split between the span of M planted orthonormal concept
vectors and its orthogonal complement: a fraction ``rho`` of each mean's
energy lies in the concept span, ``1 - rho`` outside it. Every class mean
has the same norm and the same pairwise distances for all ``rho``, so raw
classifiability stays fixed while the interpretable share varies.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .concepts import PatchPool
from .datastore import ConceptLibrary, EmbeddingDataset, SoftLabelMatrix
from .errors import UsageError
from .numerics import make_rng


@dataclass
class SynthSpec:
    dim: int = 32
    n_classes: int = 5
    n_concepts: int = 8
    samples_per_class: int = 200
    rho: float = 1.0
    noise: float = 0.25
    seed: int = 0
    mean_norm: float = 1.0
    val_per_class: int | None = None
    test_per_class: int | None = None
    bayes_samples: int = 20000

    def check(self):
        if self.n_classes < 2:
            raise UsageError("need at least 2 classes")
        if not 1 <= self.n_concepts <= self.dim:
            raise UsageError("need 1 <= M <= D")
        if not 0.0 <= self.rho <= 1.0:
            raise UsageError("rho must lie in [0, 1]")
        if not self.noise > 0:
            raise UsageError("noise scale must be positive")
        if self.rho < 1.0 and self.n_concepts == self.dim:
            raise UsageError("rho < 1 needs a nonempty complement (M < D)")
        if self.samples_per_class < 1:
            raise UsageError("need at least one sample per class")


@dataclass
class SynthCorpus:
    spec: SynthSpec
    train: EmbeddingDataset
    val: EmbeddingDataset
    test: EmbeddingDataset
    library: ConceptLibrary
    means: np.ndarray
    complement: np.ndarray
    bayes_accuracy: float


def _unit_directions(basis, count, rng):
    """``count`` unit vectors in the row span of ``basis``.

    Uses the basis rows themselves while they last (orthonormal), then
    random unit combinations.
    """
    k = basis.shape[0]
    if count <= k:
        return basis[:count].copy()
    extra = rng.standard_normal((count - k, k)) @ basis
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    return np.vstack([basis, extra])


def class_means(spec: SynthSpec, rng):
    q, r = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
    basis = (q * np.sign(np.diag(r))).T  # rows orthonormal
    concepts = basis[: spec.n_concepts]
    complement = basis[spec.n_concepts :]
    inside = _unit_directions(concepts, spec.n_classes, rng)
    if complement.shape[0]:
        outside = _unit_directions(complement, spec.n_classes, rng)
    else:
        outside = np.zeros_like(inside)
    means = spec.mean_norm * (math.sqrt(spec.rho) * inside + math.sqrt(1.0 - spec.rho) * outside)
    return means, concepts, complement


def _draw(means, per_class, noise, rng, split):
    n_classes, dim = means.shape
    labels = np.repeat(np.arange(n_classes), per_class)
    x = means[labels] + noise * rng.standard_normal((labels.size, dim))
    return EmbeddingDataset(x, labels, n_classes, split)


def bayes_accuracy(means, noise, samples, rng):
    """Monte-Carlo accuracy of the nearest-mean rule (Bayes-optimal here)."""
    labels = rng.integers(means.shape[0], size=samples)
    x = means[labels] + noise * rng.standard_normal((samples, means.shape[1]))
    d = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == labels))


def generate(spec: SynthSpec) -> SynthCorpus:
    spec.check()
    rng = make_rng(spec.seed)
    means, concepts, complement = class_means(spec, rng)
    train = _draw(means, spec.samples_per_class, spec.noise, rng, "train")
    val = _draw(means, spec.val_per_class or spec.samples_per_class, spec.noise, rng, "val")
    test = _draw(means, spec.test_per_class or spec.samples_per_class, spec.noise, rng, "test")
    library = ConceptLibrary(
        concepts,
        [f"planted_{j}" for j in range(spec.n_concepts)],
        "prototype",
        {"id": f"planted-{spec.n_concepts}", "planted": True, "seed": spec.seed},
    )
    bayes = bayes_accuracy(means, spec.noise, spec.bayes_samples, make_rng(spec.seed + 1))
    return SynthCorpus(spec, train, val, test, library, means, complement, bayes)


def soft_labels(corpus: SynthCorpus, dataset: EmbeddingDataset, noise=0.05, seed=0) -> SoftLabelMatrix:
    """Vision-language style scores: planted-concept similarities plus noise."""
    rng = make_rng(seed)
    values = dataset.embeddings @ corpus.library.vectors.T
    values = values + noise * rng.standard_normal(values.shape)
    return SoftLabelMatrix(values, list(corpus.library.names))


def patch_pool(corpus: SynthCorpus, per_class=20, signal_fraction=0.5, noise=0.1, seed=0) -> PatchPool:
    """Patches per class: noisy copies of the class's in-span direction
    (the "object" patches) mixed with random-direction distractors."""
    spec = corpus.spec
    rng = make_rng(seed)
    inside = corpus.means - (corpus.means @ corpus.complement.T) @ corpus.complement
    norms = np.linalg.norm(inside, axis=1, keepdims=True)
    inside = np.divide(inside, norms, out=np.zeros_like(inside), where=norms > 0) * spec.mean_norm
    n_signal = int(round(per_class * signal_fraction))
    rows, classes = [], []
    for k in range(spec.n_classes):
        sig = inside[k] + noise * rng.standard_normal((n_signal, spec.dim))
        junk = rng.standard_normal((per_class - n_signal, spec.dim))
        junk = spec.mean_norm * junk / np.linalg.norm(junk, axis=1, keepdims=True)
        junk += noise * rng.standard_normal(junk.shape)
        rows.append(np.vstack([sig, junk]))
        classes.extend([k] * per_class)
    return PatchPool(np.vstack(rows), np.array(classes), spec.n_classes, per_class)


# ---------------------------------------------------------------------------
# reference implementations

EXHAUSTIVE_LIMIT = 10


def exhaustive_kmeans_sse(points, k):
    """Minimum within-cluster SSE over every partition into ``k`` nonempty groups."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n > EXHAUSTIVE_LIMIT:
        raise UsageError(f"exhaustive k-means is limited to {EXHAUSTIVE_LIMIT} points")
    if not 1 <= k <= n:
        raise UsageError("k must lie in [1, n]")
    best = math.inf
    # fix point 0 in group 0 to skip relabelled duplicates
    for tail in itertools.product(range(k), repeat=n - 1):
        labels = (0,) + tail
        if len(set(labels)) != k:
            continue
        sse = 0.0
        for j in range(k):
            members = points[[i for i in range(n) if labels[i] == j]]
            sse += float(((members - members.mean(axis=0)) ** 2).sum())
        best = min(best, sse)
    return best


def exact_normal_equations(x, y, ridge=0.0):
    """Solve ``(X^T X + ridge I) c = X^T y`` in exact rational arithmetic."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    vector = y.ndim == 1
    y = y[:, None] if vector else y
    n, d = x.shape
    if n * d > 20000:
        raise UsageError("instance too large for the exact solver")
    X = [[Fraction(v) for v in row] for row in x.tolist()]
    Y = [[Fraction(v) for v in row] for row in y.tolist()]
    lam = Fraction(ridge)
    a = [[sum((X[r][i] * X[r][j] for r in range(n)), Fraction(0)) + (lam if i == j else 0) for j in range(d)]
         for i in range(d)]
    rhs = [[sum((X[r][i] * Y[r][c] for r in range(n)), Fraction(0)) for c in range(y.shape[1])] for i in range(d)]
    for col in range(d):
        piv = next((r for r in range(col, d) if a[r][col] != 0), None)
        if piv is None:
            raise UsageError("singular system")
        a[col], a[piv] = a[piv], a[col]
        rhs[col], rhs[piv] = rhs[piv], rhs[col]
        for r in range(d):
            if r != col and a[r][col] != 0:
                f = a[r][col] / a[col][col]
                a[r] = [u - f * v for u, v in zip(a[r], a[col])]
                rhs[r] = [u - f * v for u, v in zip(rhs[r], rhs[col])]
    sol = np.array([[float(v / a[i][i]) for v in rhs[i]] for i in range(d)])
    return sol[:, 0] if vector else sol


def naive_matvec(vectors, x):
    """``vectors @ x`` one exactly-rounded dot product at a time."""
    return np.array([math.fsum(float(c) * float(v) for c, v in zip(row, x)) for row in np.asarray(vectors)])


def hand_trapezoid(xs, ys, normalize=True):
    """Trapezoid rule in exact rationals, optionally divided by the span."""
    fx = [Fraction(v) for v in xs]
    fy = [Fraction(v) for v in ys]
    area = sum(((fy[i] + fy[i + 1]) / 2 * (fx[i + 1] - fx[i]) for i in range(len(fx) - 1)), Fraction(0))
    return float(area / (fx[-1] - fx[0])) if normalize else float(area)


def accuracy_recount(w, b, x, y):
    """Per-sample argmax recount (ties to the lowest class)."""
    correct = 0
    for row, label in zip(np.asarray(x), np.asarray(y)):
        scores = [math.fsum(row[j] * w[j][c] for j in range(len(row))) + b[c] for c in range(len(b))]
        best = 0
        for c in range(1, len(scores)):
            if scores[c] > scores[best]:
                best = c
        correct += best == label
    return correct / len(y)


def oracle_suite():
    return {
        "exhaustive_kmeans_sse": exhaustive_kmeans_sse,
        "exact_normal_equations": exact_normal_equations,
        "naive_matvec": naive_matvec,
        "hand_trapezoid": hand_trapezoid,
        "accuracy_recount": accuracy_recount,
    }
