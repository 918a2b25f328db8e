"""Concept-space projection, sparsification, explanations and interventions."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import removed_count
from .concepts import kmeans
from .datastore import ConceptLibrary
from .errors import DataError, NumericError, UsageError
from .numerics import make_rng

log = logging.getLogger(__name__)

MODES = ("ascending", "descending", "hard_threshold", "clustering")
_ALIASES = {"hard": "hard_threshold", "hardthres": "hard_threshold", "cluster": "clustering"}


def canonical_mode(mode):
    mode = _ALIASES.get(mode, mode)
    if mode not in MODES:
        raise UsageError(f"unknown sparsification mode {mode!r}; choose from {', '.join(MODES)}")
    return mode


def kept_count(ratio, m):
    """Concepts that survive sparsity ``ratio``: ceil((1 - ratio) * m)."""
    return m - removed_count(ratio, m)


@dataclass
class Interpretation:
    values: np.ndarray
    active: np.ndarray
    ratio: float
    mode: str


def project(x, library: ConceptLibrary):
    """Concept scores ``C^T x`` for one vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != library.dim:
        raise DataError(f"representation has dimension {x.shape[-1]}, library expects {library.dim}")
    return x @ library.vectors.T


def _check_ratio(ratio):
    if not 0.0 <= ratio < 1.0:
        raise UsageError(f"sparsity ratio {ratio} outside [0, 1)")


def sparsify_matrix(scores, ratio, mode="ascending"):
    """Row-wise sparsification of concept scores (elementwise modes only)."""
    _check_ratio(ratio)
    mode = canonical_mode(mode)
    if mode == "clustering":
        raise UsageError("clustering mode needs the library; use interpret_matrix")
    v = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite concept scores")
    m = v.shape[1]
    k = removed_count(ratio, m)
    mag = np.abs(v)
    rows = np.arange(v.shape[0])
    order = np.argsort(mag, axis=1, kind="stable")
    if mode == "descending":
        # k-th largest; with nothing to remove the largest still sets the scale
        thr = mag[rows, order[:, m - max(k, 1)]][:, None]
        return v * np.maximum(thr - mag, 0.0)
    thr = np.zeros((v.shape[0], 1)) if k == 0 else mag[rows, order[:, k - 1]][:, None]
    if mode == "hard_threshold":
        return np.where(mag > thr, v, 0.0)
    return v * np.maximum(mag - thr, 0.0)


def sparsify(scores, ratio, mode="ascending", library=None, seed=0) -> Interpretation:
    """Sparsify a single concept-score vector."""
    scores = np.asarray(scores, dtype=np.float64)
    mode = canonical_mode(mode)
    if mode == "clustering":
        if library is None:
            raise UsageError("clustering mode needs a library handle")
        groups, k = cluster_concepts(library, ratio, seed)
        values = pool_groups(scores[None, :], groups, k)[0]
    else:
        values = sparsify_matrix(scores[None, :], ratio, mode)[0]
    return Interpretation(values, np.flatnonzero(values), float(ratio), mode)


def cluster_concepts(library: ConceptLibrary, ratio, seed=0):
    """Group the library's concepts into ceil((1 - ratio) * M) k-means clusters."""
    _check_ratio(ratio)
    k = kept_count(ratio, library.size)
    result = kmeans(library.vectors, k, make_rng(seed))
    return result.labels, k


def pool_groups(scores, groups, k):
    """Scores on cluster centroids: the mean member score of each group.

    Projecting onto a centroid (the mean of its member vectors) equals
    averaging the members' projections.
    """
    onehot = np.zeros((len(groups), k))
    onehot[np.arange(len(groups)), groups] = 1.0
    return scores @ (onehot / onehot.sum(axis=0))


def interpret_matrix(x, library: ConceptLibrary, ratio, mode="ascending", seed=0):
    """Interpretations of a batch of representations.

    Returns ``(features, names)``; for clustering mode the feature
    dimension is the reduced cluster count.
    """
    mode = canonical_mode(mode)
    scores = project(x, library)
    if mode != "clustering":
        return sparsify_matrix(scores, ratio, mode), list(library.names)
    groups, k = cluster_concepts(library, ratio, seed)
    names = []
    for j in range(k):
        members = [library.names[i] for i in np.flatnonzero(groups == j)]
        names.append(members[0] if len(members) == 1 else f"group{j}[{'|'.join(members)}]")
    return pool_groups(scores, groups, k), names


# ---------------------------------------------------------------------------
# explanations


@dataclass
class Explanation:
    predicted: int
    logits: np.ndarray
    concepts: list  # dicts: name, index, contribution

    def to_dict(self):
        return {"predicted": self.predicted, "concepts": self.concepts, "deltas": []}


def explain(x, library, head, ratio, k, mode="ascending", seed=0) -> Explanation:
    feats, names = interpret_matrix(np.atleast_2d(x), library, ratio, mode, seed)
    feats = feats[0]
    if feats.shape[0] != head.W.shape[0]:
        raise DataError("head input dimension does not match the interpretation")
    logits = feats @ head.W + head.b
    pred = int(np.argmax(logits))
    contrib = feats * head.W[:, pred]
    m = len(contrib)
    if k > m:
        log.warning("top-k %d exceeds %d concepts; clamping", k, m)
        k = m
    order = sorted(range(m), key=lambda j: (-abs(contrib[j]), j))[:k]
    concepts = [{"name": names[j], "index": int(j), "contribution": float(contrib[j])} for j in order]
    return Explanation(pred, logits, concepts)


@dataclass
class Intervention:
    previous: int
    predicted: int
    logits_before: np.ndarray
    logits_after: np.ndarray
    deltas: np.ndarray
    zeroed: list
    names: list
    contributions: list  # zeroed concepts' contributions to the previous class

    def to_dict(self):
        return {
            "previous": self.previous,
            "predicted": self.predicted,
            "concepts": [
                {"name": self.names[j], "index": int(j), "contribution": float(c)}
                for j, c in zip(self.zeroed, self.contributions)
            ],
            "deltas": [float(d) for d in self.deltas],
        }


def intervene(x, library, head, ratio, zeroed, mode="ascending", seed=0) -> Intervention:
    feats, names = interpret_matrix(np.atleast_2d(x), library, ratio, mode, seed)
    feats = feats[0]
    zeroed = sorted({int(j) for j in zeroed})
    if any(j < 0 or j >= feats.shape[0] for j in zeroed):
        raise UsageError(f"concept indices must lie in [0, {feats.shape[0]})")
    before = feats @ head.W + head.b
    edited = feats.copy()
    edited[zeroed] = 0.0
    after = edited @ head.W + head.b
    deltas = -(feats[zeroed] @ head.W[zeroed]) if zeroed else np.zeros_like(before)
    prev = int(np.argmax(before))
    contributions = [feats[j] * head.W[j, prev] for j in zeroed]
    return Intervention(prev, int(np.argmax(after)), before, after, deltas, zeroed, names, contributions)
