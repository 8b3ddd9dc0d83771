"""Command line entry point: ``fieldst <command> [options]``.

Settings resolve in three layers: built-in defaults, then an optional JSON
file given with ``--config``, then explicit flags. ``--dump-config`` prints
the merged result and exits.
"""

from __future__ import annotations

import argparse
import copy
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (
    Experiment,
    ProtocolSpec,
    ablate_ensemble,
    ablate_pretrain,
    ablate_uncertainty,
    error_map,
    export_heatmap,
    mae,
    run_protocol,
)
from .fieldsim import Dataset, GenConfig, build_dataset
from .numnet import LrSchedule, forward, load_checkpoint, save_checkpoint
from .sensing import STRATEGIES, place_sensors, voronoi_encode
from .ssl_train import METHODS, TrainConfig, run_uge_st, save_artifacts

log = logging.getLogger("fieldst")

DEFAULTS = {
    "data": {
        "grid": [64, 64],
        "sensors": 16,
        "placement": "stratified-jitter",
        "labeled": 64,
        "unlabeled": 256,
        "test": 64,
        "seed": 0,
        "sources": [2, 6],
        "intensity": [0.5, 2.0],
        "boundary": 0.0,
    },
    "train": {
        "method": "uge-st",
        "labels": None,
        "ensemble": 3,
        "uncertainty": True,
        "pretrain": True,
        "epochs": 100,
        "batch": 8,
        "seed": 0,
        "hidden": [64, 256],
        "lr": 1e-3,
        "lr_min": 0.0,
        "T_0": 10,
        "T_mult": 2,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 1e-2,
    },
    "protocol": {
        "budgets": [8, 16, 32, 64],
        "methods": list(METHODS),
        "seeds": [1, 2, 3],
        "aggregate": "median",
        "sizes": [1, 2, 3, 5],
        "budget": None,
    },
    "jobs": 1,
}


class UsageError(Exception):
    pass


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _names(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    env_seed = os.environ.get("FIELDST_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise UsageError(f"FIELDST_SEED must be an integer, got {env_seed!r}")
        cfg["data"]["seed"] = cfg["train"]["seed"] = seed
    if getattr(args, "config", None):
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
    flags = {
        "data": {
            "grid": getattr(args, "grid", None),
            "sensors": getattr(args, "sensors", None),
            "placement": getattr(args, "placement", None),
            "labeled": getattr(args, "labeled", None),
            "unlabeled": getattr(args, "unlabeled", None),
            "test": getattr(args, "test", None),
            "sources": getattr(args, "sources", None),
            "boundary": getattr(args, "boundary", None),
        },
        "train": {
            "method": getattr(args, "method", None),
            "labels": getattr(args, "labels", None),
            "ensemble": getattr(args, "ensemble", None),
            "uncertainty": False if getattr(args, "no_uncertainty", False) else None,
            "pretrain": False if getattr(args, "no_pretrain", False) else None,
            "epochs": getattr(args, "epochs", None),
            "batch": getattr(args, "batch", None),
            "hidden": getattr(args, "hidden", None),
        },
        "protocol": {
            "budgets": getattr(args, "budgets", None),
            "methods": getattr(args, "methods", None),
            "seeds": getattr(args, "seeds", None),
            "sizes": getattr(args, "sizes", None),
            "budget": getattr(args, "budget", None),
            "aggregate": getattr(args, "aggregate", None),
        },
        "jobs": getattr(args, "jobs", None),
    }
    seed = getattr(args, "seed", None)
    if seed is not None:
        flags["data"]["seed"] = flags["train"]["seed"] = seed
    for section in ("data", "train", "protocol"):
        cfg[section].update({k: v for k, v in flags[section].items() if v is not None})
    if flags["jobs"] is not None:
        cfg["jobs"] = flags["jobs"]
    return cfg


def gen_config(cfg) -> GenConfig:
    d = cfg["data"]
    return GenConfig(
        grid=tuple(d["grid"]),
        n_sources=tuple(d["sources"]),
        intensity=tuple(d["intensity"]),
        boundary_value=float(d["boundary"]),
    )


def train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=int(t["epochs"]),
        batch_size=int(t["batch"]),
        schedule=LrSchedule(float(t["lr"]), float(t["lr_min"]), int(t["T_0"]), int(t["T_mult"])),
        seed=int(t["seed"]),
        method=t["method"],
        ensemble_size=int(t["ensemble"]),
        use_uncertainty=bool(t["uncertainty"]),
        use_pretrain_finetune=bool(t["pretrain"]),
        hidden=tuple(t["hidden"]),
        beta1=float(t["beta1"]),
        beta2=float(t["beta2"]),
        eps=float(t["eps"]),
        weight_decay=float(t["weight_decay"]),
        jobs=int(cfg["jobs"]),
    )


def protocol_spec(cfg, dataset) -> ProtocolSpec:
    p = cfg["protocol"]
    return ProtocolSpec(
        dataset=dataset,
        label_budgets=list(p["budgets"]),
        methods=list(p["methods"]),
        seeds=list(p["seeds"]),
        aggregate=p["aggregate"],
        train=train_config(cfg),
        ablation_budget=p["budget"],
        jobs=int(cfg["jobs"]),
    )


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, cfg, command, dataset_path=None, artifacts=None, started=None):
    """Run manifest, written to a temp file then renamed into place."""
    path = Path(path)
    manifest = {
        "command": command,
        "config": cfg,
        "tool_version": __version__,
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "artifacts": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in (artifacts or {}).items()},
    }
    if dataset_path is not None:
        manifest["dataset"] = {"path": str(dataset_path), "sha256": _sha256(dataset_path)}
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _load_dataset(path) -> Dataset:
    if path is None:
        raise UsageError("--data is required")
    if not Path(path).exists():
        raise UsageError(f"dataset {path} does not exist")
    return Dataset.load(path)


def cmd_gen_data(args, cfg) -> int:
    started = _now()
    d = cfg["data"]
    if args.out is None:
        raise UsageError("gen-data requires --out")
    gcfg = gen_config(cfg)
    layout = place_sensors(gcfg.grid, int(d["sensors"]), d["placement"], int(d["seed"]))
    out = Path(args.out)
    ds = build_dataset(int(d["labeled"]), int(d["unlabeled"]), int(d["test"]), layout, int(d["seed"]), gcfg, out, jobs=int(cfg["jobs"]))
    write_manifest(out.with_suffix(".run.json"), cfg, "gen-data", artifacts={"dataset": out, "manifest": out.with_suffix(".json")}, started=started)
    print(f"wrote {out} ({ds.counts()}, sha256 {_sha256(out)[:16]})")
    return 0


def cmd_train(args, cfg) -> int:
    started = _now()
    ds = _load_dataset(args.data)
    tcfg = train_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    exp = Experiment(ds, tcfg)
    budget = cfg["train"]["labels"] or len(exp.x["labeled"])
    x, y = exp.labeled(int(budget), tcfg.seed)
    extra = {"labels": int(budget), "dataset_sha256": exp.digest}
    if tcfg.method == "uge-st":
        result = run_uge_st(x, y, exp.x["unlabeled"], tcfg, unlabeled_ids=exp.ids["unlabeled"])
        paths = save_artifacts(result, out, tcfg, ds.grid, extra)
        model = result.student
    else:
        model = exp.model(tcfg.method, int(budget), tcfg.seed)
        save_checkpoint(model, out / "student_final.fsnn")
        (out / "config.json").write_text(json.dumps({"train": tcfg.to_dict(), **extra}, indent=2, sort_keys=True) + "\n")
        paths = {"student_final": out / "student_final.fsnn", "config": out / "config.json"}
    score = exp.test_mae(model)
    (out / "metrics.json").write_text(json.dumps({"test_mae": score}, indent=2) + "\n")
    paths["metrics"] = out / "metrics.json"
    write_manifest(out / "manifest.json", cfg, "train", args.data, paths, started)
    print(f"{tcfg.method}: test MAE {score!r}")
    return 0


def cmd_eval(args, cfg) -> int:
    ds = _load_dataset(args.data)
    if not Path(args.model).exists():
        raise UsageError(f"model {args.model} does not exist")
    exp = Experiment(ds)
    score = mae(exp.predict(load_checkpoint(args.model), args.split), ds.split_fields(args.split))
    print(json.dumps({"model": str(args.model), "split": args.split, "mae": score}))
    if args.out:
        Path(args.out).write_text(json.dumps({"split": args.split, "mae": score}, indent=2) + "\n")
    return 0


def _spec_from_args(args, cfg):
    ds = _load_dataset(args.data)
    return protocol_spec(cfg, ds), ds


def _finish_table(table, args, cfg, command, started):
    print(table.format())
    if args.out:
        csv_path, json_path = table.save(args.out)
        write_manifest(
            Path(args.out).with_suffix(".run.json"), cfg, command, args.data, {"table": csv_path, "summary": json_path}, started
        )
    if table.failed:
        for row in table.failed:
            print(f"FAILED: {row}", file=sys.stderr)
        return 1
    return 0


def cmd_protocol(args, cfg) -> int:
    started = _now()
    spec, _ = _spec_from_args(args, cfg)
    return _finish_table(run_protocol(spec), args, cfg, "protocol", started)


def cmd_ablate(args, cfg) -> int:
    started = _now()
    spec, _ = _spec_from_args(args, cfg)
    sizes = cfg["protocol"]["sizes"]
    if args.study == "ensemble":
        table = ablate_ensemble(sizes, spec)
    elif args.study == "pretrain":
        table = ablate_pretrain(spec)
    else:
        table = ablate_uncertainty([n for n in sizes if n >= 2] or sizes, spec)
    return _finish_table(table, args, cfg, f"ablate {args.study}", started)


def cmd_export(args, cfg) -> int:
    ds = _load_dataset(args.data)
    split = args.split
    if not 0 <= args.sample < ds.counts()[split]:
        raise UsageError(f"sample {args.sample} out of range for split {split}")
    truth = ds.split_fields(split)[args.sample]
    if args.what == "field":
        values = truth
    elif args.what == "voronoi":
        values = voronoi_encode(ds.split_observations(split)[args.sample], ds.layout)
    else:
        if not args.model or not Path(args.model).exists():
            raise UsageError(f"--what {args.what} needs an existing --model")
        net = load_checkpoint(args.model)
        x = ds.normalize(ds.split_observations(split)[args.sample])
        pred = ds.denormalize(forward(net, x)).reshape(ds.grid)
        values = pred if args.what == "prediction" else error_map(pred, truth)
    prefix = Path(args.out)
    for fmt in ("pgm", "csv"):
        path = export_heatmap(values, prefix.with_suffix(f".{fmt}"), fmt)
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; explicit flags override it")
    common.add_argument("--dump-config", action="store_true", help="print the merged configuration and exit")
    common.add_argument("--jobs", type=int, help="max concurrent independent jobs")
    common.add_argument("--seed", type=int, help="seed (default: FIELDST_SEED or 0)")
    common.add_argument("-v", "--verbose", action="store_true")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--ensemble", type=int, help="number of ensemble teachers")
    training.add_argument("--no-uncertainty", action="store_true", help="disable uncertainty weighting")
    training.add_argument("--no-pretrain", action="store_true", help="train the student jointly instead of pre-train + fine-tune")
    training.add_argument("--epochs", type=int)
    training.add_argument("--batch", type=int, help="batch size (default 8)")
    training.add_argument("--hidden", type=_ints, help="hidden layer widths, e.g. 64,256")

    p = argparse.ArgumentParser(prog="fieldst", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fieldst {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"))
    g.add_argument("--sensors", type=int)
    g.add_argument("--placement", choices=STRATEGIES)
    g.add_argument("--labeled", type=int)
    g.add_argument("--unlabeled", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--sources", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--boundary", type=float)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common, training], help="train one model")
    t.add_argument("--data", required=True)
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--labels", type=int, help="label budget (default: whole labeled split)")
    t.add_argument("--out", required=True, help="artifact directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--split", choices=("labeled", "unlabeled", "test"), default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("protocol", parents=[common, training], help="label-budget sweep")
    pr.add_argument("--data", required=True)
    pr.add_argument("--budgets", type=_ints)
    pr.add_argument("--methods", type=_names)
    pr.add_argument("--seeds", type=_ints)
    pr.add_argument("--aggregate", choices=("median", "mean"))
    pr.add_argument("--out", help="CSV path; a JSON summary is written next to it")
    pr.set_defaults(func=cmd_protocol)

    a = sub.add_parser("ablate", parents=[common, training], help="ablation studies")
    a.add_argument("study", choices=("ensemble", "pretrain", "uncertainty"))
    a.add_argument("--data", required=True)
    a.add_argument("--sizes", type=_ints, help="ensemble sizes, e.g. 1,2,3,5")
    a.add_argument("--budget", type=int, help="label budget (default: largest protocol budget)")
    a.add_argument("--budgets", type=_ints)
    a.add_argument("--seeds", type=_ints)
    a.add_argument("--aggregate", choices=("median", "mean"))
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export", parents=[common], help="export a heatmap as PGM + CSV")
    x.add_argument("--data", required=True)
    x.add_argument("--what", choices=("field", "prediction", "error", "voronoi"), default="field")
    x.add_argument("--model")
    x.add_argument("--sample", type=int, default=0)
    x.add_argument("--split", choices=("labeled", "unlabeled", "test"), default="test")
    x.add_argument("--out", required=True, help="output prefix")
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        if args.command == "protocol" and cfg["protocol"]["budgets"] != sorted(cfg["protocol"]["budgets"]):
            raise UsageError("--budgets must be ascending")
        return args.func(args, cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, OSError) as exc:
        print(f"fieldst: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
