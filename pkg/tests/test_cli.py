import json

import pytest

from iis import __version__
from iis.cli import main


def run(args, capsys=None):
    code = main([str(a) for a in args])
    out = capsys.readouterr() if capsys else None
    return code, out


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "gen", "--rho", "1", "--dim", "16", "--classes", "3", "--concepts", "6",
                 "--per-class", "60", "--patches", "8", "--soft-labels", "true", "--seed", "2", "--out", str(d)]) == 0
    return d


HEAD = ["--epochs", "8"]


def test_synth_outputs(data):
    names = {p.name for p in data.iterdir()}
    assert {"train.iise", "val.iise", "test.iise", "planted.json", "patches.iise", "soft_train.json",
            "manifest.json", "synth.json"} <= names
    man = json.loads((data / "manifest.json").read_text())
    assert man["command"] == "synth gen" and man["tool_version"] == __version__ and man["seed"] == 2


def test_eval_iis_on_rho_one(data, tmp_path, capsys):
    code, out = run(["eval", "iis", "--train", data / "train.iise", "--val", data / "val.iise", "--test",
                     data / "test.iise", "--library", data / "planted.json", "--out", tmp_path, *HEAD], capsys)
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["iis"] >= 0.97
    assert (tmp_path / "curve.csv").read_text().startswith("sparsity,arr\n")
    assert json.loads(out.out)["iis"] == report["iis"]


def test_manifest_rerun_is_byte_identical(data, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    sched = tmp_path / "s.json"
    sched.write_text('{"format": "iis-schedule", "version": 1, "ratios": [0.0, 0.5, 0.9]}')
    args = ["eval", "iis", "--train", data / "train.iise", "--val", data / "val.iise", "--library",
            data / "planted.json", "--schedule", sched, "--mode", "hard", "--seed", "9", *HEAD]
    assert run(args + ["--out", a])[0] == 0
    assert run(["eval", "iis", "--config", a / "manifest.json", "--out", b])[0] == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert json.loads((b / "manifest.json").read_text())["mode"] == "hard"


def test_flags_override_config(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rho": 0.5, "dim": 8, "concepts": 4, "classes": 2, "per_class": 10}))
    assert run(["synth", "gen", "--config", cfg, "--dim", "10", "--out", tmp_path / "o"])[0] == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["dim"] == 10 and man["rho"] == 0.5


def test_seed_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("IIS_SEED", "17")
    assert run(["synth", "gen", "--per-class", "5", "--out", tmp_path])[0] == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 17


def test_single_ratio_schedule_is_usage_error(data, tmp_path, capsys):
    sched = tmp_path / "one.json"
    sched.write_text('{"format": "iis-schedule", "version": 1, "ratios": [0.5]}')
    code, out = run(["eval", "iis", "--train", data / "train.iise", "--val", data / "val.iise", "--library",
                     data / "planted.json", "--schedule", sched, "--out", tmp_path / "o"], capsys)
    assert code == 1 and "at least 2" in out.err


@pytest.mark.parametrize(
    "args,code",
    [
        (["eval", "iis", "--bogus"], 1),
        (["nope"], 1),
        (["explain", "--out", "x"], 1),
        (["eval", "curve", "--report", "/nonexistent/r.json", "--out", "{tmp}"], 2),
        (["eval", "iis", "--train", "/nonexistent.iise", "--val", "/n.iise", "--library", "/l.json", "--out",
          "{tmp}"], 2),
    ],
)
def test_error_exit_codes(args, code, tmp_path, capsys):
    args = [a.replace("{tmp}", str(tmp_path)) for a in args]
    got, out = run(args, capsys)
    assert got == code and out.err.startswith("iis: error")


def test_bad_magic_is_data_error(data, tmp_path, capsys):
    bad = tmp_path / "bad.iise"
    bad.write_bytes(b"JUNK" + (data / "train.iise").read_bytes()[4:])
    code, out = run(["eval", "entropy", "--data", bad, "--library", data / "planted.json", "--head", "h.json",
                     "--s", "0.5", "--out", tmp_path], capsys)
    assert code == 2 and "bad magic" in out.err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"rhoo": 1}')
    code, out = run(["synth", "gen", "--config", cfg, "--out", tmp_path], capsys)
    assert code == 1 and "rhoo" in out.err


def test_divergence_exit_code(data, tmp_path, capsys):
    code, out = run(["finetune", "--train", data / "train.iise", "--val", data / "val.iise", "--ft-epochs", "5",
                     "--ml", "8", "--lr", "1e6", "--weight-decay", "0", "--out", tmp_path, *HEAD], capsys)
    assert code == 3


def test_library_builders(data, tmp_path):
    for kind, extra in (("prototype", []), ("cluster", []), ("end2end", ["--train", data / "train.iise",
                                                                          "--e2e-epochs", "3"])):
        assert run(["concepts", "build", "--kind", kind, "--m", "6", "--patches", data / "patches.iise",
                    "--per-class", "4", "--name", kind, "--out", tmp_path, *extra])[0] == 0
        assert (tmp_path / f"{kind}.json").exists() and (tmp_path / f"{kind}.iise").exists()
    for loss in ("mse", "cos3"):
        assert run(["concepts", "fit-text", "--train", data / "train.iise", "--soft", data / "soft_train.json",
                    "--loss", loss, "--steps", "20", "--name", loss, "--out", tmp_path])[0] == 0
    assert run(["concepts", "build", "--kind", "magic", "--m", "2", "--patches", data / "patches.iise",
                "--out", tmp_path])[0] == 1


def test_head_explain_intervene_entropy_chain(data, tmp_path, capsys):
    lib = data / "planted.json"
    assert run(["train", "head", "--train", data / "train.iise", "--val", data / "val.iise", "--library", lib,
                "--s", "0.5", "--out", tmp_path, *HEAD])[0] == 0
    head = tmp_path / "head.json"
    capsys.readouterr()
    code, out = run(["explain", "--data", data / "test.iise", "--index", "4", "--library", lib, "--head", head,
                     "--s", "0.5", "--top-k", "2", "--out", tmp_path], capsys)
    exp = json.loads(out.out)
    assert code == 0 and len(exp["concepts"]) == 2
    assert set(exp) >= {"predicted", "concepts", "deltas"}
    assert set(exp["concepts"][0]) == {"name", "index", "contribution"}
    code, out = run(["intervene", "--data", data / "test.iise", "--index", "4", "--library", lib, "--head", head,
                     "--s", "0.5", "--zero", "0,2", "--out", tmp_path], capsys)
    inter = json.loads(out.out)
    assert code == 0 and [c["index"] for c in inter["concepts"]] == [0, 2] and len(inter["deltas"]) == 3
    code, _ = run(["intervene", "--data", data / "test.iise", "--library", lib, "--head", head, "--s", "0.5",
                   "--zero", "99", "--out", tmp_path], capsys)
    assert code == 1
    assert run(["eval", "entropy", "--data", data / "val.iise", "--library", lib, "--head", head, "--s", "0.5",
                "--out", tmp_path])[0] == 0
    ent = json.loads((tmp_path / "entropy.json").read_text())
    assert len(ent["entropy"]) == 3 and ent["ratio"] == 0.5


def test_eval_curve_regenerates_csv(data, tmp_path):
    a = tmp_path / "a"
    assert run(["eval", "iis", "--train", data / "train.iise", "--val", data / "val.iise", "--library",
                data / "planted.json", "--out", a, *HEAD])[0] == 0
    assert run(["eval", "curve", "--report", a / "report.json", "--out", tmp_path / "c"])[0] == 0
    assert (tmp_path / "c" / "curve.csv").read_bytes() == (a / "curve.csv").read_bytes()


def test_finetune_command(data, tmp_path):
    assert run(["finetune", "--train", data / "train.iise", "--val", data / "val.iise", "--ft-epochs", "3",
                "--ml", "8", "--s", "0.2", "--snapshots", "1", "--library", data / "planted.json",
                "--schedule", "visual", "--out", tmp_path, *HEAD])[0] == 0
    assert (tmp_path / "trace.csv").read_text().startswith("epoch,acc_dense,acc_sparse,ratio\n")
    assert len((tmp_path / "alignment.csv").read_text().splitlines()) == 4  # header + epochs 0, 1, 3
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["n_concepts"] == 8 and man["ratio"] == 0.2


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert __version__ in capsys.readouterr().out
