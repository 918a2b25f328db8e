import numpy as np
import pytest

from iis.autodiff import Tensor, threshold_index
from iis.errors import DivergenceError, UsageError
from iis.evaluator import HeadConfig
from iis.finetune import (
    FinetuneConfig,
    apply_adapter,
    config_to_dict,
    finetune_iis,
    init_adapter,
    init_params,
    joint_objective,
    save_snapshot,
    track_iis_alignment,
    write_alignment_csv,
    write_trace_csv,
)
from iis.datastore import read_matrix
from iis.numerics import finite_difference_check, make_rng
from iis.synth import SynthSpec, generate

FAST = HeadConfig(epochs=10)


@pytest.fixture(scope="module")
def clean_corpus():
    return generate(SynthSpec(rho=0.6, noise=0.1, seed=0, samples_per_class=100, bayes_samples=100))


def test_defaults_exposed():
    cfg = FinetuneConfig()
    assert cfg.n_concepts == 200 and cfg.ratio == 0.1
    d = config_to_dict(cfg)
    assert d["n_concepts"] == 200 and d["ratio"] == 0.1 and d["head"]["learning_rates"] == [0.1, 0.01, 0.001]


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_adapter_starts_as_identity(kind):
    x = make_rng(0).standard_normal((7, 6))
    assert np.array_equal(apply_adapter(init_adapter(kind, 6, make_rng(1)), x), x)


def test_config_checks():
    for bad in (dict(ratio=1.0), dict(adapter="conv"), dict(n_concepts=0)):
        with pytest.raises(UsageError):
            FinetuneConfig(**bad).check()


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_joint_objective_gradient(seed, kind):
    rng = make_rng(seed)
    d, n, m, k = 5, 8, 6, 3
    x = rng.standard_normal((n, d))
    y = rng.integers(0, k, n)
    params = init_adapter(kind, d, rng)
    params = {p: v + 0.1 * rng.standard_normal(v.shape) for p, v in params.items()}
    params.update(C_l=rng.standard_normal((d, m)), W_h=rng.standard_normal((d, k)), b_h=rng.standard_normal(k),
                  W_g=rng.standard_normal((m, k)), b_g=rng.standard_normal(k))
    for name in params:
        base = {p: Tensor(v) for p, v in params.items()}
        z = apply_adapter(params, x)
        _, pos = threshold_index(z @ params["C_l"], 0.3)

        def f(t, name=name, base=base, pos=pos):
            return joint_objective({**base, name: t}, x, y, 0.3, pos)[0]

        assert finite_difference_check(f, params[name]) <= 1e-4, name


def test_zero_learning_rate_is_frozen(clean_corpus):
    c = clean_corpus
    cfg = FinetuneConfig(epochs=3, n_concepts=16, learning_rate=0.0, head=FAST)
    start = init_params(c.train, c.val, cfg)
    res = finetune_iis(c.train, c.val, cfg, params=start)
    for k in start:
        assert np.array_equal(res.params[k], start[k])
    losses = [row["loss"] for row in res.trace]
    assert len(set(losses)) == 1


def test_windows_non_decreasing_on_separable_data(clean_corpus):
    c = clean_corpus
    res = finetune_iis(c.train, c.val, FinetuneConfig(epochs=100, n_concepts=32, head=FAST))
    dense = np.array([r["acc_dense"] for r in res.trace[1:]]).reshape(10, 10).mean(axis=1)
    sparse = np.array([r["acc_sparse"] for r in res.trace[1:]]).reshape(10, 10).mean(axis=1)
    assert np.all(np.diff(dense) >= 0) and np.all(np.diff(sparse) >= 0)
    assert res.trace[-1]["ratio"] >= res.trace[0]["ratio"]
    assert sorted(res.snapshots) == [0, 100]


def test_identity_concepts_at_zero_sparsity(clean_corpus):
    c = clean_corpus
    d = c.train.dim
    cfg = FinetuneConfig(ratio=0.0, n_concepts=d, epochs=30, frozen=("C_l",), head=FAST)
    params = init_params(c.train, c.val, cfg)
    params["C_l"] = np.eye(d)
    res = finetune_iis(c.train, c.val, cfg, params=params)
    assert np.array_equal(res.params["C_l"], np.eye(d))
    last = res.trace[-1]
    assert abs(last["acc_dense"] - last["acc_sparse"]) <= 0.02


def test_deterministic(clean_corpus):
    c = clean_corpus
    cfg = FinetuneConfig(epochs=4, n_concepts=8, head=FAST)
    a, b = finetune_iis(c.train, c.val, cfg), finetune_iis(c.train, c.val, cfg)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert a.trace == b.trace


def test_divergence_aborts_with_trace(clean_corpus):
    c = clean_corpus
    cfg = FinetuneConfig(epochs=20, n_concepts=8, learning_rate=50.0, warmup_fraction=0.0, weight_decay=0.0,
                         divergence_factor=1.0, divergence_patience=2, head=FAST)
    with pytest.raises(DivergenceError) as info:
        finetune_iis(c.train, c.val, cfg)
    assert info.value.trace and info.value.trace[0]["epoch"] == 0
    assert info.value.exit_code == 3


def test_outputs(tmp_path, clean_corpus):
    c = clean_corpus
    res = finetune_iis(c.train, c.val, FinetuneConfig(epochs=2, n_concepts=8, snapshot_epochs=(1,), head=FAST))
    assert sorted(res.snapshots) == [0, 1, 2]
    write_trace_csv(res.trace, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,acc_dense,acc_sparse,ratio" and len(lines) == 4
    paths = save_snapshot(res.snapshots[1], tmp_path, 1)
    assert len(paths) == len(res.params)
    m, _, _ = read_matrix(tmp_path / "snapshot_e0001_C_l.iise")
    assert m.shape == (c.train.dim, 8)


def test_alignment_table(tmp_path, clean_corpus):
    c = clean_corpus
    res = finetune_iis(c.train, c.val, FinetuneConfig(epochs=3, n_concepts=8, head=FAST))
    rows = track_iis_alignment(res.snapshots, c.train, c.val, c.library, [0.0, 0.5], 0.1, "ascending", FAST,
                               test=c.test)
    assert [r.epoch for r in rows] == [0, 3]
    assert all(0 <= r.accuracy <= 1 for r in rows)
    write_alignment_csv(rows, tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().startswith("epoch,accuracy,simplified_iis,original_iis\n")


def test_alignment_epoch_zero_uses_raw_embeddings(clean_corpus):
    from iis.evaluator import compute_iis

    c = clean_corpus
    res = finetune_iis(c.train, c.val, FinetuneConfig(epochs=1, n_concepts=8, head=FAST))
    rows = track_iis_alignment({0: res.snapshots[0]}, c.train, c.val, c.library, [0.0, 0.5], head_config=FAST)
    assert rows[0].original_iis == compute_iis(c.train, c.val, c.library, [0.0, 0.5], config=FAST).iis
