"""Concept library construction.

Four builders produce a :class:`~iis.datastore.ConceptLibrary`:

* ``build_prototype``: individual patches, spread evenly over classes.
* ``build_cluster``: k-means centroids of the patch embeddings.
* ``build_end2end``: patches assigned to concepts by a learned one-hot
  matrix (straight-through Gumbel-Softmax), trained against a linear head.
* ``fit_text_concepts``: concept vectors regressed onto vision-language
  soft labels (ridge least squares or cos-cubed similarity).

Visual concept vectors are always the mean embedding of their patches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, cross_entropy_logits
from .datastore import ConceptLibrary, EmbeddingDataset, SoftLabelMatrix
from .errors import DataError, SingularSystemError, UsageError, ValidationError
from .numerics import OptimizerState, gumbel_softmax_st, optimizer_step

log = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-4


@dataclass
class PatchPool:
    embeddings: np.ndarray
    classes: np.ndarray
    n_classes: int
    patches_per_class: int | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] == 0:
            raise ValidationError("patch pool must be a non-empty matrix")
        if self.classes.shape != (self.embeddings.shape[0],):
            raise ValidationError("one class index per patch required")
        if self.classes.min() < 0 or self.classes.max() >= self.n_classes:
            raise ValidationError("patch class out of range")
        if self.patches_per_class is not None:
            counts = np.bincount(self.classes, minlength=self.n_classes)
            if np.any(counts != self.patches_per_class):
                raise ValidationError(f"every class must contribute exactly {self.patches_per_class} patches")

    @classmethod
    def from_dataset(cls, dataset: EmbeddingDataset):
        return cls(dataset.embeddings, dataset.labels, dataset.n_classes)

    @property
    def size(self):
        return self.embeddings.shape[0]


def select_patches(pool: PatchPool, per_class: int, rng) -> PatchPool:
    """Randomly keep ``per_class`` patches of every class."""
    keep = []
    for k in range(pool.n_classes):
        idx = np.flatnonzero(pool.classes == k)
        if idx.size < per_class:
            raise DataError(f"class {k} has {idx.size} patches, fewer than {per_class}")
        keep.append(np.sort(rng.choice(idx, size=per_class, replace=False)))
    keep = np.concatenate(keep)
    return PatchPool(pool.embeddings[keep], pool.classes[keep], pool.n_classes, per_class)


def visual_concept_vector(patch_embeddings):
    """Mean embedding of the patches forming one visual concept."""
    return np.asarray(patch_embeddings, dtype=np.float64).mean(axis=0)


# ---------------------------------------------------------------------------
# prototype


def build_prototype(pool: PatchPool, m: int, rng) -> ConceptLibrary:
    n = pool.n_classes
    if m < n:
        raise UsageError(f"prototype library needs M >= N ({m} < {n})")
    if m > pool.size:
        raise UsageError(f"M={m} exceeds the {pool.size} available patches")
    base, extra = divmod(m, n)
    chosen, names = [], []
    for k in range(n):
        quota = base + (1 if k < extra else 0)
        idx = np.flatnonzero(pool.classes == k)
        if idx.size < quota:
            raise DataError(f"class {k} has {idx.size} patches, needs {quota}")
        picked = np.sort(rng.choice(idx, size=quota, replace=False))
        chosen.extend(picked.tolist())
        names.extend(f"prototype_c{k}_p{i}" for i in picked)
    return ConceptLibrary(
        pool.embeddings[chosen],
        names,
        "prototype",
        {"id": f"prototype-{m}", "patches": chosen, "per_class_max": base + (1 if extra else 0)},
    )


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    sse: float
    sse_trace: list
    iterations: int


def _sq_dists(points, centroids):
    d = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def kmeans_plus_plus(points, k, rng):
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def _lloyd(points, centroids, max_iter):
    k = centroids.shape[0]
    labels = None
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(points, centroids)
        new_labels = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            if not (labels == j).any():
                dist = ((points - centroids[labels]) ** 2).sum(axis=1)
                sizes = np.bincount(labels, minlength=k)
                dist[sizes[labels] <= 1] = -1.0
                labels[int(np.argmax(dist))] = j
        for j in range(k):
            centroids[j] = points[labels == j].mean(axis=0)
        trace.append(_sse(points, centroids, labels))
    return centroids, labels, trace, it


def _hartigan(points, labels, k, trace, max_sweeps=100):
    """Single-point transfers that lower the SSE once centroids move.

    Moving x from cluster i (size n_i) to j (size n_j) changes the SSE by
    n_j/(n_j+1)*|x-c_j|^2 - n_i/(n_i-1)*|x-c_i|^2. A partition with no
    improving move is also a fixed point of Lloyd's iteration.
    """
    sizes = np.bincount(labels, minlength=k).astype(np.float64)
    centroids = np.array([points[labels == j].mean(axis=0) for j in range(k)])
    for _ in range(max_sweeps):
        moved = False
        for i in range(points.shape[0]):
            a = labels[i]
            if sizes[a] <= 1:
                continue
            d2 = ((centroids - points[i]) ** 2).sum(axis=1)
            cost = sizes / (sizes + 1.0) * d2
            cost[a] = sizes[a] / (sizes[a] - 1.0) * d2[a]
            b = int(np.argmin(cost))
            if b == a or cost[b] >= cost[a] * (1.0 - 1e-12):
                continue
            centroids[a] = (centroids[a] * sizes[a] - points[i]) / (sizes[a] - 1.0)
            centroids[b] = (centroids[b] * sizes[b] + points[i]) / (sizes[b] + 1.0)
            sizes[a] -= 1.0
            sizes[b] += 1.0
            labels[i] = b
            moved = True
        if not moved:
            break
        centroids = np.array([points[labels == j].mean(axis=0) for j in range(k)])
        trace.append(_sse(points, centroids, labels))
    return centroids, labels


def _sse(points, centroids, labels):
    diff = points - centroids[labels]
    return float((diff * diff).sum())


def kmeans(points, k, rng, max_iter=100, n_init=10) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds, polished by Hartigan
    single-point transfers; best of ``n_init`` restarts.

    Ties go to the lowest centroid index. An emptied cluster is re-seeded
    with the point farthest from its current centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if not 1 <= k <= points.shape[0]:
        raise UsageError(f"k={k} must lie in [1, {points.shape[0]}]")
    best = None
    for _ in range(n_init):
        centroids = kmeans_plus_plus(points, k, rng)
        centroids, labels, trace, iters = _lloyd(points, centroids, max_iter)
        centroids, labels = _hartigan(points, labels, k, trace)
        sse = _sse(points, centroids, labels)
        if best is None or sse < best.sse:
            best = KMeansResult(centroids, labels, sse, trace, iters)
    return best


def build_cluster(pool: PatchPool, m: int, rng, n_init=10) -> ConceptLibrary:
    if m > pool.size:
        raise UsageError(f"M={m} exceeds the {pool.size} available patches")
    result = kmeans(pool.embeddings, m, rng, n_init=n_init)
    return ConceptLibrary(
        result.centroids,
        [f"cluster_{j}" for j in range(m)],
        "cluster",
        {"id": f"cluster-{m}", "sse": result.sse, "iterations": result.iterations, "n_init": n_init},
    )


# ---------------------------------------------------------------------------
# End2End


@dataclass
class End2EndResult:
    library: ConceptLibrary
    assignment: np.ndarray  # P x M one-hot
    loss_trace: list


def build_end2end(
    pool: PatchPool,
    train: EmbeddingDataset,
    m: int,
    epochs: int,
    rng,
    temperature=1.0,
    learning_rate=0.05,
    batch_size=64,
) -> End2EndResult:
    """Learn a one-hot patch-to-concept assignment jointly with a linear head.

    Training minimises cross-entropy of ``x^T C_p Q W + b`` where each row of
    ``Q`` is a straight-through Gumbel-Softmax sample over its logits. The
    returned vectors are patch means of the final (noise-free) assignment;
    concepts left without patches are dropped.
    """
    if train.n_samples == 0:
        raise DataError("End2End training split is empty")
    if not 1 <= m <= pool.size:
        raise UsageError(f"M={m} must lie in [1, {pool.size}]")
    if pool.embeddings.shape[1] != train.dim:
        raise DataError("patch and sample embeddings differ in dimension")

    scores = train.embeddings @ pool.embeddings.T  # n x P
    n_classes = train.n_classes
    params = {
        "logits": 0.01 * rng.standard_normal((pool.size, m)),
        "W": np.zeros((m, n_classes)),
        "b": np.zeros(n_classes),
    }
    state = OptimizerState(kind="adam", learning_rate=learning_rate)
    trace = []
    n = train.n_samples
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            logits = Tensor(params["logits"], requires_grad=True)
            w = Tensor(params["W"], requires_grad=True)
            b = Tensor(params["b"], requires_grad=True)
            q = gumbel_softmax_st(logits, temperature, rng)
            feats = Tensor(scores[idx]) @ q
            loss = cross_entropy_logits(feats @ w + b, train.labels[idx])
            loss.backward()
            params = optimizer_step(params, {"logits": logits.grad, "W": w.grad, "b": b.grad}, state)
            total += float(loss.value) * len(idx)
        trace.append(total / n)

    assign = np.argmax(params["logits"], axis=1)
    q_hard = np.zeros((pool.size, m))
    q_hard[np.arange(pool.size), assign] = 1.0
    counts = q_hard.sum(axis=0)
    keep = np.flatnonzero(counts > 0)
    if keep.size < m:
        log.warning("End2End: dropping %d concepts with no assigned patches", m - keep.size)
    vectors = (pool.embeddings.T @ q_hard[:, keep] / counts[keep]).T
    library = ConceptLibrary(
        vectors,
        [f"end2end_{j}" for j in keep],
        "end2end",
        {
            "id": f"end2end-{keep.size}",
            "requested_m": m,
            "m": int(keep.size),
            "epochs": epochs,
            "temperature": temperature,
            "learning_rate": learning_rate,
            "assignment": assign.tolist(),
        },
    )
    return End2EndResult(library, q_hard[:, keep], trace)


# ---------------------------------------------------------------------------
# text concepts


def _row_normalize(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def ridge_normal_equations(x, y, ridge):
    """Solve ``(X^T X + ridge I) C = X^T Y`` for ``C`` (D x M)."""
    gram = x.T @ x
    if ridge > 0:
        gram = gram + ridge * np.eye(gram.shape[0])
    elif np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise SingularSystemError("normal matrix is singular; use a ridge penalty > 0")
    return np.linalg.solve(gram, x.T @ y)


def cos_cubed_similarity(x: Tensor, concepts: Tensor, soft_unit: np.ndarray) -> Tensor:
    """Per-concept cos-cubed similarity between ``X C`` and soft labels.

    Both score columns are centred over samples, cubed and L2-normalised;
    ``soft_unit`` is the already-transformed soft-label matrix.
    """
    q = x @ concepts
    q = q - q.mean(axis=0, keepdims=True)
    q3 = q**3
    q3 = q3 / ((q3 * q3).sum(axis=0, keepdims=True) ** 0.5)
    return (q3 * soft_unit).sum(axis=0)


def cube_normalize(y):
    y = y - y.mean(axis=0, keepdims=True)
    y3 = y**3
    norms = np.linalg.norm(y3, axis=0, keepdims=True)
    if np.any(norms == 0):
        raise DataError("a soft-label column is constant; cos-cubed similarity is undefined")
    return y3 / norms


def fit_text_concepts(
    train: EmbeddingDataset,
    soft: SoftLabelMatrix,
    loss="mse",
    ridge=DEFAULT_RIDGE,
    normalize_inputs=True,
    normalize_outputs=True,
    fit_intercept=False,
    steps=300,
    learning_rate=1e-2,
) -> ConceptLibrary:
    if soft.values.shape[0] != train.n_samples:
        raise DataError(f"{soft.values.shape[0]} soft-label rows for {train.n_samples} samples")
    if ridge < 0:
        raise UsageError("ridge penalty must be nonnegative")
    x = _row_normalize(train.embeddings) if normalize_inputs else train.embeddings.copy()
    y = soft.values
    if fit_intercept:
        xs, ys = x - x.mean(axis=0), y - y.mean(axis=0)
    else:
        xs, ys = x, y
    concepts = ridge_normal_equations(xs, ys, ridge)  # D x M

    prov = {"id": f"text-{loss}-{len(soft.names)}", "loss": loss, "ridge": ridge,
            "normalized_inputs": normalize_inputs, "fit_intercept": fit_intercept}
    if loss in ("cos_cubed", "cos3"):
        target = cube_normalize(y)
        start = _row_normalize(concepts.T).T
        params = {"C": start}
        state = OptimizerState(kind="adam", learning_rate=learning_rate)
        xt = Tensor(x)
        before = float(cos_cubed_similarity(xt, Tensor(start), target).value.mean())
        for _ in range(steps):
            c = Tensor(params["C"], requires_grad=True)
            objective = -cos_cubed_similarity(xt, c, target).mean()
            objective.backward()
            params = optimizer_step(params, {"C": c.grad}, state)
        concepts = params["C"]
        after = float(cos_cubed_similarity(xt, Tensor(concepts), target).value.mean())
        prov.update(loss="cos_cubed", steps=steps, similarity_before=before, similarity_after=after)
    elif loss != "mse":
        raise UsageError(f"unknown text-concept loss {loss!r}")

    vectors = concepts.T
    names = list(soft.names)
    if normalize_outputs:
        norms = np.linalg.norm(vectors, axis=1)
        dead = np.flatnonzero(norms == 0)
        if dead.size:
            log.warning("dropping %d text concepts with zero vectors", dead.size)
            keep = norms > 0
            vectors, names = vectors[keep], [nm for nm, k in zip(names, keep) if k]
            prov["dropped"] = [soft.names[i] for i in dead]
        vectors = _row_normalize(vectors)
    prov["normalized"] = bool(normalize_outputs)
    return ConceptLibrary(vectors, names, "text", prov)
