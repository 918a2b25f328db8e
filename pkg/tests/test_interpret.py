import numpy as np
import pytest

from iis.datastore import ConceptLibrary
from iis.errors import DataError, NumericError, UsageError
from iis.evaluator import LinearHead
from iis.interpret import (
    canonical_mode,
    cluster_concepts,
    explain,
    interpret_matrix,
    intervene,
    kept_count,
    pool_groups,
    project,
    sparsify,
)
from iis.numerics import make_rng
from iis.synth import naive_matvec

X = np.array([3.0, -2.0, 1.0, 0.5])


def lib_of(vectors, kind="prototype"):
    vectors = np.asarray(vectors, dtype=float)
    return ConceptLibrary(vectors, [f"c{i}" for i in range(len(vectors))], kind)


def test_project_identity_and_matvec():
    assert np.array_equal(project([3.0, 4.0], lib_of(np.eye(2))), [3.0, 4.0])
    assert np.array_equal(project([3.0, 4.0], lib_of([[1, 0], [0, 2], [1, 1]])), [3.0, 8.0, 7.0])


def test_project_matches_exact_matvec():
    rng = make_rng(0)
    c = rng.standard_normal((6, 8))
    x = rng.standard_normal(8)
    np.testing.assert_allclose(project(x, lib_of(c)), naive_matvec(c, x), atol=1e-12, rtol=0)


def test_project_dimension_mismatch():
    with pytest.raises(DataError):
        project(np.ones(3), lib_of(np.eye(2)))


def test_sparsify_examples():
    assert np.array_equal(sparsify(X, 0.5, "ascending").values, [6.0, -2.0, 0.0, 0.0])
    assert np.array_equal(sparsify(X, 0.5, "hard_threshold").values, [3.0, -2.0, 0.0, 0.0])
    assert np.array_equal(sparsify(X, 0.0, "ascending").values, [9.0, -4.0, 1.0, 0.25])
    assert sparsify(X, 0.5).active.tolist() == [0, 1]


def test_sparsify_descending_mirrors():
    # 2nd largest |x| is 2: keep the small ones scaled by (2 - |x|)
    out = sparsify(X, 0.5, "descending").values
    np.testing.assert_allclose(out, [0.0, 0.0, 1.0, 0.75])
    # nothing removed: the largest magnitude sets the scale
    np.testing.assert_allclose(sparsify(X, 0.0, "descending").values, [0.0, -2.0, 2.0, 1.25])


def test_sparsify_errors():
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(UsageError):
            sparsify(X, bad)
    with pytest.raises(NumericError):
        sparsify([np.nan, 1.0], 0.5)
    with pytest.raises(UsageError):
        sparsify(X, 0.5, "sideways")
    with pytest.raises(UsageError):
        sparsify(X, 0.5, "clustering")


def test_mode_aliases():
    assert canonical_mode("hard") == "hard_threshold"
    assert canonical_mode("cluster") == "clustering"


def test_sparsify_ties_reduce_support():
    out = sparsify([1.0, -1.0, 1.0, 1.0], 0.5).values
    assert np.count_nonzero(out) == 0


def test_kept_count():
    assert kept_count(0.5, 4) == 2
    assert kept_count(0.98, 8) == 1
    assert kept_count(0.0, 5) == 5
    assert kept_count(0.9, 4751) == 476


def test_clustering_mode_is_mean_over_groups():
    vecs = np.array([[1, 0], [1, 0.01], [0, 1], [0.01, 1]], dtype=float)
    lib = lib_of(vecs)
    groups, k = cluster_concepts(lib, 0.5, seed=0)
    assert k == 2 and groups[0] == groups[1] and groups[2] == groups[3] and groups[0] != groups[2]
    x = np.array([2.0, 3.0])
    out = sparsify(project(x, lib), 0.5, "clustering", library=lib).values
    cents = np.array([vecs[groups == j].mean(axis=0) for j in range(2)])
    np.testing.assert_allclose(out, cents @ x, atol=1e-12)


def test_interpret_matrix_cluster_names():
    lib = lib_of(np.eye(3))
    feats, names = interpret_matrix(np.ones((2, 3)), lib, 0.0, "clustering")
    assert feats.shape == (2, 3) and sorted(names) == ["c0", "c1", "c2"]
    feats, names = interpret_matrix(np.ones((2, 3)), lib, 0.5, "clustering")
    assert feats.shape == (2, 2) and any(n.startswith("group") for n in names)


def test_pool_groups_handles_batch():
    s = np.arange(8.0).reshape(2, 4)
    out = pool_groups(s, np.array([0, 1, 0, 1]), 2)
    np.testing.assert_allclose(out, [[1.0, 2.0], [5.0, 6.0]])


def identity_head(m, n=None, bias=None):
    n = n or m
    w = np.zeros((m, n))
    w[np.arange(min(m, n)), np.arange(min(m, n))] = 1.0
    return LinearHead(w, np.zeros(n) if bias is None else np.asarray(bias, float), "interpretation")


def test_explain_designated_concept():
    lib = lib_of(np.eye(3))
    exp = explain([0.1, 2.0, 0.2], lib, identity_head(3), 0.0, 1)
    assert exp.predicted == 1
    assert exp.concepts[0]["index"] == 1 and exp.concepts[0]["name"] == "c1"


def test_explain_all_zero_stable_order():
    exp = explain(np.zeros(3), lib_of(np.eye(3)), identity_head(3), 0.0, 3)
    assert [c["index"] for c in exp.concepts] == [0, 1, 2]
    assert all(c["contribution"] == 0.0 for c in exp.concepts)
    assert exp.to_dict()["deltas"] == []


def test_explain_clamps_k(caplog):
    exp = explain([1.0, 2.0], lib_of(np.eye(2)), identity_head(2), 0.0, 10)
    assert len(exp.concepts) == 2
    assert "clamping" in caplog.text


def test_explain_matches_full_sort():
    rng = make_rng(3)
    lib = lib_of(rng.standard_normal((7, 5)))
    head = LinearHead(rng.standard_normal((7, 4)), rng.standard_normal(4), "interpretation")
    x = rng.standard_normal(5)
    exp = explain(x, lib, head, 0.3, 4)
    feats = sparsify(project(x, lib), 0.3).values
    pred = int(np.argmax(feats @ head.W + head.b))
    contrib = [(feats[j] * head.W[j, pred], j) for j in range(7)]
    oracle = sorted(contrib, key=lambda t: (-abs(t[0]), t[1]))[:4]
    assert [(c["contribution"], c["index"]) for c in exp.concepts] == oracle


def test_intervene_zero_concept_no_change():
    lib = lib_of(np.eye(3))
    res = intervene([0.0, 1.0, 2.0], lib, identity_head(3), 0.0, [0])
    assert res.previous == res.predicted and np.all(res.deltas == 0.0)


def test_intervene_all_gives_bias():
    rng = make_rng(1)
    head = LinearHead(rng.standard_normal((3, 2)), np.array([0.3, -0.1]), "interpretation")
    res = intervene(rng.standard_normal(3), lib_of(np.eye(3)), head, 0.0, [0, 1, 2])
    assert np.array_equal(res.logits_after, head.b)


def test_intervene_flips_prediction():
    # concept 0 alone favours class A=0; bias leans slightly to B=1
    head = LinearHead(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([0.0, 0.5]), "interpretation")
    res = intervene([1.0, 0.3], lib_of(np.eye(2)), head, 0.0, [0])
    assert (res.previous, res.predicted) == (0, 1)
    d = res.to_dict()
    assert d["concepts"] == [{"name": "c0", "index": 0, "contribution": 1.0}]


def test_intervene_deltas_match_recompute():
    rng = make_rng(2)
    lib = lib_of(rng.standard_normal((6, 4)))
    head = LinearHead(rng.standard_normal((6, 3)), rng.standard_normal(3), "interpretation")
    x = rng.standard_normal(4)
    res = intervene(x, lib, head, 0.2, [1, 4])
    feats = sparsify(project(x, lib), 0.2).values
    edited = feats.copy()
    edited[[1, 4]] = 0
    np.testing.assert_allclose(res.deltas, (edited @ head.W + head.b) - (feats @ head.W + head.b), atol=1e-12)


def test_intervene_index_bounds():
    with pytest.raises(UsageError):
        intervene([1.0, 2.0], lib_of(np.eye(2)), identity_head(2), 0.0, [2])


def test_explain_head_dimension_mismatch():
    with pytest.raises(DataError):
        explain([1.0, 2.0], lib_of(np.eye(2)), identity_head(3), 0.0, 1)
