"""Command-line interface.

Every command resolves its configuration as built-in defaults, then an
optional flat JSON ``--config`` file, then explicit flags, and writes the
resolved configuration to ``<out>/manifest.json``. Feeding a manifest back
through ``--config`` reproduces the run.

Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .concepts import PatchPool, build_cluster, build_end2end, build_prototype, fit_text_concepts, select_patches
from .datastore import (
    dump_json,
    load_embeddings,
    load_library,
    load_report,
    load_schedule,
    load_soft_labels,
    save_embeddings,
    save_library,
    save_report,
    save_schedule,
    save_soft_labels,
    write_curve_csv,
)
from .errors import DataError, IISError, UsageError
from .evaluator import (
    PRESETS,
    HeadConfig,
    accuracy,
    compute_iis,
    contribution_matrix,
    load_head,
    preset_schedule,
    save_head,
    train_head,
)
from .finetune import (
    FinetuneConfig,
    finetune_iis,
    save_snapshot,
    track_iis_alignment,
    write_alignment_csv,
    write_trace_csv,
)
from .interpret import MODES, canonical_mode, explain, interpret_matrix, intervene
from .numerics import make_rng
from .synth import SynthSpec, generate, patch_pool, soft_labels

log = logging.getLogger("iis")


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    lowered = str(text).lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _default_seed():
    raw = os.environ.get("IIS_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"IIS_SEED must be an integer, got {raw!r}") from None


# (flag, dest, type, default, help); default REQUIRED marks a mandatory option
REQUIRED = object()

COMMON = [
    ("--out", "out", str, REQUIRED, "output directory"),
    ("--seed", "seed", int, None, "random seed (default: $IIS_SEED or 0)"),
]

HEAD = [
    ("--epochs", "epochs", int, 30, "head training epochs"),
    ("--batch-size", "batch_size", int, 256, "head mini-batch size"),
    ("--lrs", "learning_rates", _floats, [0.1, 0.01, 0.001], "comma-separated learning-rate grid"),
    ("--optimizer", "optimizer", str, "sgd", "sgd or adam"),
    ("--scheduler", "scheduler", str, "none", "none or exp (decay 0.99 per epoch)"),
    ("--standardize", "standardize", _bool, True, "standardise features while fitting (true/false)"),
]

SPLITS = [
    ("--train", "train", str, REQUIRED, "training split (.iise)"),
    ("--val", "val", str, REQUIRED, "validation split (.iise)"),
    ("--test", "test", str, None, "test split (.iise); validation is reused when absent"),
]

INTERP = [
    ("--library", "library", str, REQUIRED, "concept library manifest (.json)"),
    ("--s", "ratio", float, REQUIRED, "sparsity ratio in [0, 1)"),
    ("--mode", "mode", str, "ascending", "sparsification mode: " + ", ".join(MODES)),
]

COMMANDS = {
    "concepts build": [
        ("--kind", "kind", str, REQUIRED, "prototype, cluster or end2end"),
        ("--m", "m", int, REQUIRED, "number of concepts"),
        ("--patches", "patches", str, REQUIRED, "patch pool (.iise with per-patch class labels)"),
        ("--per-class", "per_class", int, None, "randomly keep this many patches per class first"),
        ("--train", "train", str, None, "training split (end2end only)"),
        ("--e2e-epochs", "e2e_epochs", int, 30, "end2end training epochs"),
        ("--temperature", "temperature", float, 1.0, "Gumbel-Softmax temperature"),
        ("--name", "name", str, "library", "output stem"),
    ],
    "concepts fit-text": [
        ("--train", "train", str, REQUIRED, "training split (.iise)"),
        ("--soft", "soft", str, REQUIRED, "soft-label manifest (.json)"),
        ("--loss", "loss", str, "mse", "mse or cos3"),
        ("--ridge", "ridge", float, 1e-4, "ridge penalty"),
        ("--normalize", "normalize", _bool, True, "L2-normalise inputs and concept vectors"),
        ("--intercept", "intercept", _bool, False, "fit an unpenalised intercept"),
        ("--steps", "steps", int, 300, "cos-cubed ascent steps"),
        ("--name", "name", str, "library", "output stem"),
    ],
    "eval iis": SPLITS
    + [
        ("--library", "library", str, REQUIRED, "concept library manifest (.json)"),
        ("--schedule", "schedule", str, "visual", "schedule file or preset: visual, text, " + ", ".join(PRESETS)),
        ("--mode", "mode", str, "ascending", "sparsification mode: " + ", ".join(MODES)),
        ("--jobs", "jobs", int, 1, "parallel per-ratio head trainings"),
    ]
    + HEAD,
    "eval curve": [("--report", "report", str, REQUIRED, "IIS report (.json)")],
    "eval entropy": [
        ("--data", "data", str, REQUIRED, "evaluation split (.iise)"),
        ("--head", "head", str, REQUIRED, "interpretation head (.json)"),
    ]
    + INTERP,
    "train head": SPLITS
    + [
        ("--library", "library", str, None, "train on interpretations of this library"),
        ("--s", "ratio", float, 0.0, "sparsity ratio (with --library)"),
        ("--mode", "mode", str, "ascending", "sparsification mode (with --library)"),
    ]
    + HEAD,
    "finetune": SPLITS
    + [
        ("--s", "ratio", float, 0.1, "fixed sparsity ratio of the simplified IIS"),
        ("--ml", "n_concepts", int, 200, "columns of the learnable concept matrix"),
        ("--ft-epochs", "ft_epochs", int, 100, "fine-tuning epochs"),
        ("--ft-batch-size", "ft_batch_size", int, 128, "fine-tuning batch size"),
        ("--lr", "lr", float, 3e-4, "peak AdamW learning rate"),
        ("--weight-decay", "weight_decay", float, 0.3, "decoupled weight decay"),
        ("--adapter", "adapter", str, "linear", "linear or mlp"),
        ("--snapshots", "snapshots", _ints, [], "extra epochs to snapshot"),
        ("--library", "library", str, None, "library for original-IIS tracking"),
        ("--schedule", "schedule", str, "visual", "schedule for original-IIS tracking"),
        ("--mode", "mode", str, "ascending", "sparsification mode for tracking"),
    ]
    + HEAD,
    "explain": [
        ("--data", "data", str, REQUIRED, "split holding the sample (.iise)"),
        ("--index", "index", int, 0, "sample row"),
        ("--head", "head", str, REQUIRED, "interpretation head (.json)"),
        ("--top-k", "top_k", int, 5, "number of concepts to report"),
    ]
    + INTERP,
    "intervene": [
        ("--data", "data", str, REQUIRED, "split holding the sample (.iise)"),
        ("--index", "index", int, 0, "sample row"),
        ("--head", "head", str, REQUIRED, "interpretation head (.json)"),
        ("--zero", "zero", _ints, REQUIRED, "comma-separated concept indices to zero"),
    ]
    + INTERP,
    "synth gen": [
        ("--rho", "rho", float, 1.0, "interpretable energy fraction of class means"),
        ("--dim", "dim", int, 32, "embedding dimension D"),
        ("--classes", "classes", int, 5, "number of classes N"),
        ("--concepts", "concepts", int, 8, "planted concepts M"),
        ("--per-class", "per_class", int, 200, "samples per class and split"),
        ("--noise", "noise", float, 0.25, "isotropic noise scale"),
        ("--patches", "patches", int, 0, "also write a patch pool with this many patches per class"),
        ("--soft-labels", "soft_labels", _bool, False, "also write soft labels for each split"),
    ],
}

META_KEYS = ("command", "tool", "tool_version")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="iis", description="Inherent Interpretability Score toolkit")
    parser.add_argument("--version", action="version", version=f"iis {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)
    subgroups = {}
    for name, options in COMMANDS.items():
        head, _, tail = name.partition(" ")
        if tail:
            if head not in subgroups:
                sp = groups.add_parser(head, help=f"{head} commands")
                subgroups[head] = sp.add_subparsers(dest="sub", required=True, parser_class=_Parser)
            cmd = subgroups[head].add_parser(tail, argument_default=argparse.SUPPRESS)
        else:
            cmd = groups.add_parser(head, argument_default=argparse.SUPPRESS)
        cmd.add_argument("--config", dest="config", help="flat JSON config; explicit flags take precedence")
        for flag, dest, typ, default, help_text in COMMON + options:
            extra = "" if default is REQUIRED or default is None else f" (default: {default})"
            cmd.add_argument(flag, dest=dest, type=typ, help=help_text + extra)
        cmd.set_defaults(command=name)
    return parser


def resolve(command, explicit: dict):
    """Merge defaults < config file < explicit flags and check required keys."""
    options = {dest: (typ, default) for _, dest, typ, default, _ in COMMON + COMMANDS[command]}
    cfg = {dest: default for dest, (_, default) in options.items() if default is not REQUIRED}
    cfg["seed"] = _default_seed()
    config_path = explicit.pop("config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise DataError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{config_path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{config_path}: config must be a flat JSON object")
        if loaded.get("command", command) != command:
            raise UsageError(f"{config_path} was written by '{loaded['command']}', not '{command}'")
        for key, value in loaded.items():
            if key in META_KEYS:
                continue
            if key not in options:
                raise UsageError(f"{config_path}: unknown key {key!r}")
            typ = options[key][0]
            try:
                cfg[key] = value if value is None or typ is str else typ(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{config_path}: bad value for {key!r}: {exc}") from None
    cfg.update({k: v for k, v in explicit.items() if k in options})
    missing = [dest for dest, (_, default) in options.items() if default is REQUIRED and cfg.get(dest) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def write_manifest(command, cfg, out: Path):
    manifest = {"command": command, "tool": "iis", "tool_version": __version__}
    manifest.update(cfg)
    dump_json(manifest, out / "manifest.json")


def head_config(cfg, seed=None) -> HeadConfig:
    scheduler = cfg["scheduler"]
    if scheduler in ("none", "None", None):
        scheduler = None
    elif scheduler != "exp":
        raise UsageError(f"unknown scheduler {scheduler!r}")
    if cfg["optimizer"] not in ("sgd", "adam"):
        raise UsageError(f"unknown optimizer {cfg['optimizer']!r}")
    return HeadConfig(
        learning_rates=tuple(cfg["learning_rates"]),
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        optimizer=cfg["optimizer"],
        scheduler=scheduler,
        standardize=cfg["standardize"],
        seed=cfg["seed"] if seed is None else seed,
    )


def _schedule(spec, library=None):
    path = Path(spec)
    if path.suffix == ".json" or path.exists():
        return load_schedule(path)
    return preset_schedule(spec, None if library is None else library.size)


def _splits(cfg):
    train = load_embeddings(cfg["train"], "train")
    val = load_embeddings(cfg["val"], "val")
    test = load_embeddings(cfg["test"], "test") if cfg.get("test") else None
    for other in (val, test):
        if other is not None and (other.dim != train.dim or other.n_classes != train.n_classes):
            raise DataError("splits disagree in dimension or class count")
    return train, val, test


# ---------------------------------------------------------------------------
# commands


def cmd_concepts_build(cfg, out):
    pool = PatchPool.from_dataset(load_embeddings(cfg["patches"]))
    rng = make_rng(cfg["seed"])
    if cfg.get("per_class"):
        pool = select_patches(pool, cfg["per_class"], rng)
    kind = cfg["kind"]
    if kind == "prototype":
        library = build_prototype(pool, cfg["m"], rng)
    elif kind == "cluster":
        library = build_cluster(pool, cfg["m"], rng)
    elif kind == "end2end":
        if not cfg.get("train"):
            raise UsageError("end2end needs --train")
        result = build_end2end(pool, load_embeddings(cfg["train"], "train"), cfg["m"], cfg["e2e_epochs"], rng,
                               temperature=cfg["temperature"])
        library = result.library
    else:
        raise UsageError(f"unknown library kind {kind!r}")
    library.provenance.update({"seed": cfg["seed"], "source": str(cfg["patches"])})
    save_library(library, out / f"{cfg['name']}.json")
    return {"library": str(out / f"{cfg['name']}.json"), "m": library.size}


def cmd_concepts_fit_text(cfg, out):
    train = load_embeddings(cfg["train"], "train")
    soft = load_soft_labels(cfg["soft"])
    library = fit_text_concepts(train, soft, loss=cfg["loss"], ridge=cfg["ridge"], normalize_inputs=cfg["normalize"],
                                normalize_outputs=cfg["normalize"], fit_intercept=cfg["intercept"], steps=cfg["steps"])
    library.provenance.update({"source": str(cfg["soft"])})
    save_library(library, out / f"{cfg['name']}.json")
    return {"library": str(out / f"{cfg['name']}.json"), "m": library.size}


def cmd_eval_iis(cfg, out):
    train, val, test = _splits(cfg)
    library = load_library(cfg["library"])
    schedule = _schedule(cfg["schedule"], library)
    report = compute_iis(train, val, library, schedule, cfg["mode"], head_config(cfg), test=test, jobs=cfg["jobs"])
    save_report(report, out / "report.json")
    save_schedule(report.schedule, out / "schedule.json")
    write_curve_csv(report, out / "curve.csv")
    return {"iis": report.iis, "representation_accuracy": report.representation_accuracy}


def cmd_eval_curve(cfg, out):
    report = load_report(cfg["report"])
    write_curve_csv(report, out / "curve.csv")
    return {"points": len(report.arr)}


def cmd_eval_entropy(cfg, out):
    data = load_embeddings(cfg["data"])
    result = contribution_matrix(data, load_library(cfg["library"]), load_head(cfg["head"]), cfg["ratio"],
                                 cfg["mode"], seed=cfg["seed"])
    payload = result.to_dict()
    payload.update({"ratio": cfg["ratio"], "mode": canonical_mode(cfg["mode"])})
    dump_json(payload, out / "entropy.json")
    return {"entropy": payload["entropy"]}


def cmd_train_head(cfg, out):
    train, val, test = _splits(cfg)
    splits = [train, val] + ([test] if test is not None else [])
    kind = "representation"
    feats = [d.embeddings for d in splits]
    if cfg.get("library"):
        library = load_library(cfg["library"])
        feats = [interpret_matrix(f, library, cfg["ratio"], cfg["mode"], cfg["seed"])[0] for f in feats]
        kind = "interpretation"
    head = train_head(feats[0], train.labels, feats[1], val.labels, train.n_classes, head_config(cfg), kind)
    save_head(head, out / "head.json")
    held = (feats[2], test.labels) if test is not None else (feats[1], val.labels)
    return {"val_accuracy": head.val_accuracy, "accuracy": accuracy(head, *held)}


def cmd_finetune(cfg, out):
    train, val, test = _splits(cfg)
    hc = head_config(cfg)
    config = FinetuneConfig(ratio=cfg["ratio"], n_concepts=cfg["n_concepts"], epochs=cfg["ft_epochs"],
                            batch_size=cfg["ft_batch_size"], learning_rate=cfg["lr"],
                            weight_decay=cfg["weight_decay"], adapter=cfg["adapter"],
                            snapshot_epochs=tuple(cfg["snapshots"]), seed=cfg["seed"], head=hc)
    result = finetune_iis(train, val, config)
    write_trace_csv(result.trace, out / "trace.csv")
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for epoch, params in sorted(result.snapshots.items()):
        save_snapshot(params, snap_dir, epoch)
    summary = {"final": result.trace[-1]}
    if cfg.get("library"):
        library = load_library(cfg["library"])
        rows = track_iis_alignment(result.snapshots, train, val, library, _schedule(cfg["schedule"], library),
                                   cfg["ratio"], cfg["mode"], hc, test=test)
        write_alignment_csv(rows, out / "alignment.csv")
        summary["alignment"] = [r.__dict__ for r in rows]
    return summary


def _sample(cfg):
    data = load_embeddings(cfg["data"])
    if not 0 <= cfg["index"] < data.n_samples:
        raise UsageError(f"--index must lie in [0, {data.n_samples})")
    return data.embeddings[cfg["index"]], int(data.labels[cfg["index"]])


def cmd_explain(cfg, out):
    x, label = _sample(cfg)
    exp = explain(x, load_library(cfg["library"]), load_head(cfg["head"]), cfg["ratio"], cfg["top_k"],
                  cfg["mode"], seed=cfg["seed"])
    payload = exp.to_dict()
    payload["label"] = label
    dump_json(payload, out / "explanation.json")
    return payload


def cmd_intervene(cfg, out):
    x, label = _sample(cfg)
    res = intervene(x, load_library(cfg["library"]), load_head(cfg["head"]), cfg["ratio"], cfg["zero"],
                    cfg["mode"], seed=cfg["seed"])
    payload = res.to_dict()
    payload["label"] = label
    dump_json(payload, out / "intervention.json")
    return payload


def cmd_synth_gen(cfg, out):
    spec = SynthSpec(dim=cfg["dim"], n_classes=cfg["classes"], n_concepts=cfg["concepts"],
                     samples_per_class=cfg["per_class"], rho=cfg["rho"], noise=cfg["noise"], seed=cfg["seed"])
    corpus = generate(spec)
    for split in (corpus.train, corpus.val, corpus.test):
        save_embeddings(split, out / f"{split.split}.iise")
    save_library(corpus.library, out / "planted.json")
    if cfg["patches"]:
        pool = patch_pool(corpus, per_class=cfg["patches"], seed=cfg["seed"])
        from .datastore import EmbeddingDataset

        save_embeddings(EmbeddingDataset(pool.embeddings, pool.classes, pool.n_classes), out / "patches.iise")
    if cfg["soft_labels"]:
        for i, split in enumerate((corpus.train, corpus.val, corpus.test)):
            save_soft_labels(soft_labels(corpus, split, seed=cfg["seed"] + i), out / f"soft_{split.split}.json")
    info = {"bayes_accuracy": corpus.bayes_accuracy, "rho": spec.rho, "noise": spec.noise}
    dump_json(info, out / "synth.json")
    return info


HANDLERS = {
    "concepts build": cmd_concepts_build,
    "concepts fit-text": cmd_concepts_fit_text,
    "eval iis": cmd_eval_iis,
    "eval curve": cmd_eval_curve,
    "eval entropy": cmd_eval_entropy,
    "train head": cmd_train_head,
    "finetune": cmd_finetune,
    "explain": cmd_explain,
    "intervene": cmd_intervene,
    "synth gen": cmd_synth_gen,
}


def run(argv=None):
    """Parse, execute and return the command's JSON-able summary."""
    args = vars(build_parser().parse_args(argv))
    logging.basicConfig(level=logging.INFO if args.pop("verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.pop("command")
    args.pop("group", None)
    args.pop("sub", None)
    cfg = resolve(command, args)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    summary = HANDLERS[command](cfg, out)
    write_manifest(command, cfg, out)
    return summary


def main(argv=None):
    try:
        summary = run(argv)
    except IISError as exc:
        print(f"iis: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"iis: error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        print(f"iis: error: numeric failure: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
