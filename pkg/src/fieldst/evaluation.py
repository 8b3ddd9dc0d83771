"""MAE metric, label-budget protocol, ablations and heatmap export."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fieldsim import Dataset
from .numnet import DenseNet, forward
from .ssl_train import (
    METHODS,
    TrainConfig,
    derive_seed,
    finetune_student,
    pretrain_student,
    pseudo_label,
    run_uge_st,
    train_ensemble_teachers,
    train_self_training,
)

log = logging.getLogger(__name__)

_SUBSET = 4


def mae(predictions, truths) -> float:
    """Mean over samples of each sample's mean absolute pixel error."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if p.size == 0:
        raise ValueError("cannot score an empty set")
    if p.ndim < 2:
        return float(np.mean(np.abs(p - t)))
    per_sample = np.abs(p - t).reshape(len(p), -1).mean(axis=1)
    return float(per_sample.mean())


def error_map(prediction, truth) -> np.ndarray:
    return np.abs(np.asarray(prediction, dtype=np.float64) - np.asarray(truth, dtype=np.float64))


def aggregate(values, how="median") -> float:
    vals = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if vals.size == 0:
        return float("nan")
    if how == "median":
        return float(np.median(vals))
    if how == "mean":
        return float(np.mean(vals))
    raise ValueError(f"unknown aggregate {how!r}")


@dataclass
class ProtocolSpec:
    dataset: object
    label_budgets: list[int] = field(default_factory=lambda: [16])
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    aggregate: str = "median"
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation_budget: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one seed")
        if list(self.label_budgets) != sorted(self.label_budgets) or min(self.label_budgets, default=1) < 1:
            raise ValueError("label budgets must be positive and ascending")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if self.aggregate not in ("median", "mean"):
            raise ValueError("aggregate must be 'median' or 'mean'")

    def config_dict(self) -> dict:
        return {
            "label_budgets": list(self.label_budgets),
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "aggregate": self.aggregate,
            "train": self.train.to_dict(),
            "ablation_budget": self.ablation_budget,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.config_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d, dataset=None) -> ProtocolSpec:
        d = dict(d)
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if dataset is not None:
            d["dataset"] = dataset
        return cls(**d)


@dataclass
class ResultTable:
    """Per-seed MAE rows keyed by ``key_names`` (e.g. method and budget)."""

    key_names: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    how: str = "median"

    def add(self, key, seed, value, error=None):
        row = dict(zip(self.key_names, key))
        row.update(seed=int(seed), mae=float(value))
        if error is not None:
            row["error"] = error
        self.rows.append(row)

    def keys(self) -> list[tuple]:
        seen = []
        for r in self.rows:
            k = tuple(r[n] for n in self.key_names)
            if k not in seen:
                seen.append(k)
        return seen

    def values(self, *key) -> list[float]:
        return [r["mae"] for r in self.rows if tuple(r[n] for n in self.key_names) == tuple(key)]

    def aggregate(self, *key) -> float:
        return aggregate(self.values(*key), self.how)

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.rows if "error" in r]

    def sorted_rows(self):
        order = {k: i for i, k in enumerate(self.keys())}
        return sorted(self.rows, key=lambda r: (order[tuple(r[n] for n in self.key_names)], r["seed"]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*self.key_names, "seed", "mae"])
        for r in self.sorted_rows():
            w.writerow([*(r[n] for n in self.key_names), r["seed"], repr(r["mae"])])
        return buf.getvalue()

    def summary(self) -> dict:
        cells = []
        for k in self.keys():
            cells.append(
                {
                    **dict(zip(self.key_names, k)),
                    "per_seed": self.values(*k),
                    self.how: self.aggregate(*k),
                }
            )
        return {"aggregate": self.how, "cells": cells, "failed": self.failed, **self.meta}

    def save(self, csv_path) -> tuple[Path, Path]:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(self.to_csv())
        json_path = csv_path.with_suffix(".json")
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path

    def format(self) -> str:
        lines = []
        for k in self.keys():
            vals = ", ".join(f"{v:.4e}" for v in self.values(*k))
            label = " ".join(f"{n}={v}" for n, v in zip(self.key_names, k))
            lines.append(f"{label:<40s} {self.how}={self.aggregate(*k):.4e}  [{vals}]")
        return "\n".join(lines)


def _load(dataset) -> Dataset:
    return dataset if isinstance(dataset, Dataset) else Dataset.load(dataset)


class Experiment:
    """Normalized views of a dataset plus caches shared across cells.

    Teachers, pre-trained students and fine-tuned students are memoized by
    everything that determines them, so ablations that share arms with the
    protocol (or each other) reuse the same models instead of retraining.
    """

    def __init__(self, dataset, train: TrainConfig = TrainConfig()):
        self.dataset = _load(dataset)
        self.train = train
        ds = self.dataset
        hw = ds.grid[0] * ds.grid[1]
        self.x = {s: ds.normalize(ds.split_observations(s)) for s in ("labeled", "unlabeled", "test")}
        self.y = {s: ds.normalize(ds.split_fields(s)).reshape(-1, hw) for s in ("labeled", "unlabeled", "test")}
        self.ids = {s: ds.split_ids(s) for s in ("labeled", "unlabeled", "test")}
        self.digest = ds.digest()
        self._cache: dict = {}
        self._locks: dict = {}
        self._guard = threading.Lock()

    def _memo(self, key, fn):
        with self._guard:
            if key in self._cache:
                return self._cache[key]
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._cache:
                self._cache[key] = fn()
            return self._cache[key]

    def subset(self, budget, seed) -> np.ndarray:
        """Labeled rows for ``budget``: a prefix of one seed-fixed permutation (nested budgets)."""
        n = len(self.x["labeled"])
        if budget > n:
            raise ValueError(f"budget {budget} exceeds the labeled pool of {n}")
        perm = np.random.default_rng(derive_seed(seed, _SUBSET)).permutation(n)
        return perm[:budget]

    def labeled(self, budget, seed):
        idx = self.subset(budget, seed)
        return self.x["labeled"][idx], self.y["labeled"][idx]

    def config(self, seed, **changes) -> TrainConfig:
        return replace(self.train, seed=int(seed), **changes)

    def teacher(self, budget, seed, k) -> DenseNet:
        def fit():
            x, y = self.labeled(budget, seed)
            return train_ensemble_teachers(x, y, self.config(seed), members=[k])[0]

        return self._memo(("teacher", budget, seed, k), fit)

    def teachers(self, budget, seed, n) -> list[DenseNet]:
        return [self.teacher(budget, seed, k) for k in range(n)]

    def pseudo(self, budget, seed, n):
        return self._memo(
            ("pseudo", budget, seed, n),
            lambda: pseudo_label(self.teachers(budget, seed, n), self.x["unlabeled"], self.ids["unlabeled"]),
        )

    def pretrained(self, budget, seed, n, use_uncertainty) -> DenseNet:
        # with one teacher the weights are all ones either way
        use_uncertainty = bool(use_uncertainty) and n > 1
        cfg = self.config(seed, ensemble_size=n, use_uncertainty=use_uncertainty)
        return self._memo(
            ("pretrained", budget, seed, n, use_uncertainty),
            lambda: pretrain_student(self.pseudo(budget, seed, n), self.x["unlabeled"], cfg),
        )

    def finetuned(self, budget, seed, n, use_uncertainty) -> DenseNet:
        use_uncertainty = bool(use_uncertainty) and n > 1
        cfg = self.config(seed, ensemble_size=n, use_uncertainty=use_uncertainty)

        def fit():
            x, y = self.labeled(budget, seed)
            return finetune_student(self.pretrained(budget, seed, n, use_uncertainty), x, y, cfg)

        return self._memo(("finetuned", budget, seed, n, use_uncertainty), fit)

    def self_training(self, budget, seed) -> DenseNet:
        def fit():
            x, y = self.labeled(budget, seed)
            return train_self_training(x, y, self.x["unlabeled"], self.config(seed), teacher=self.teacher(budget, seed, 0))

        return self._memo(("self-training", budget, seed), fit)

    def uge_st(self, budget, seed) -> DenseNet:
        """Final student of the configured UGE-ST variant."""
        cfg = self.config(seed)
        if cfg.use_pretrain_finetune:
            return self.finetuned(budget, seed, cfg.ensemble_size, cfg.use_uncertainty)

        def fit():
            x, y = self.labeled(budget, seed)
            teachers = self.teachers(budget, seed, cfg.ensemble_size)
            return run_uge_st(x, y, self.x["unlabeled"], cfg, teachers=teachers).student

        return self._memo(("uge-st-joint", budget, seed), fit)

    def model(self, method, budget, seed) -> DenseNet:
        if method == "supervised":
            return self.teacher(budget, seed, 0)
        if method == "self-training":
            return self.self_training(budget, seed)
        if method == "uge-st":
            return self.uge_st(budget, seed)
        raise ValueError(f"unknown method {method!r}")

    def predict(self, net, split="test") -> np.ndarray:
        h, w = self.dataset.grid
        return self.dataset.denormalize(forward(net, self.x[split])).reshape(-1, h, w)

    def test_mae(self, net) -> float:
        return mae(self.predict(net, "test"), self.dataset.split_fields("test"))

    def pseudo_mae(self, budget, seed, n) -> float:
        h, w = self.dataset.grid
        labels = self.dataset.denormalize(self.pseudo(budget, seed, n).labels).reshape(-1, h, w)
        return mae(labels, self.dataset.split_fields("unlabeled"))


def _experiment(spec: ProtocolSpec, experiment):
    if experiment is not None:
        return experiment
    return Experiment(spec.dataset, spec.train)


def _run_cells(cells, fn, jobs, table):
    def run(cell):
        key, seed = cell
        try:
            return key, seed, fn(key, seed), None
        except Exception as exc:  # recorded per cell; the run continues
            log.exception("cell %s seed %s failed", key, seed)
            return key, seed, float("nan"), f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    for key, seed, value, err in results:
        table.add(key, seed, value, err)
    return table


def _meta(spec, exp, **extra):
    return {"config_sha256": spec.config_hash(), "dataset_sha256": exp.digest, **extra}


def run_protocol(spec: ProtocolSpec, experiment: Experiment | None = None) -> ResultTable:
    """Train and score every (method, budget, seed) cell on the test split."""
    exp = _experiment(spec, experiment)
    pool = len(exp.x["labeled"])
    if max(spec.label_budgets) > pool:
        raise ValueError(f"budget {max(spec.label_budgets)} exceeds the labeled pool of {pool}")
    table = ResultTable(("method", "budget"), meta=_meta(spec, exp), how=spec.aggregate)
    cells = [((m, b), s) for m in spec.methods for b in spec.label_budgets for s in spec.seeds]
    return _run_cells(cells, lambda key, seed: exp.test_mae(exp.model(key[0], key[1], seed)), spec.jobs, table)


def _ablation_budget(spec):
    return spec.ablation_budget if spec.ablation_budget is not None else max(spec.label_budgets)


def ablate_ensemble(sizes, spec: ProtocolSpec, experiment: Experiment | None = None) -> ResultTable:
    """Pseudo-label, PT-student and UGE-ST MAE against ensemble size.

    Students here are trained without uncertainty weighting so that only the
    ensemble size varies. Pseudo-label MAE is scored on the unlabeled
    split's retained ground truth.
    """
    exp = _experiment(spec, experiment)
    b = _ablation_budget(spec)
    arms = {
        "pseudo_label": lambda n, s: exp.pseudo_mae(b, s, n),
        "pt_student": lambda n, s: exp.test_mae(exp.pretrained(b, s, n, False)),
        "uge_st": lambda n, s: exp.test_mae(exp.finetuned(b, s, n, False)),
    }
    table = ResultTable(("arm", "n"), meta=_meta(spec, exp, budget=b), how=spec.aggregate)
    cells = [((a, int(n)), s) for a in arms for n in sizes for s in spec.seeds]
    return _run_cells(cells, lambda key, seed: arms[key[0]](key[1], seed), spec.jobs, table)


def ablate_pretrain(spec: ProtocolSpec, experiment: Experiment | None = None) -> ResultTable:
    """Single-teacher arms: pseudo label, joint self-training, PT student, fine-tuned student."""
    exp = _experiment(spec, experiment)
    b = _ablation_budget(spec)
    arms = {
        "pseudo_label": lambda s: exp.pseudo_mae(b, s, 1),
        "self_training": lambda s: exp.test_mae(exp.self_training(b, s)),
        "pt_student": lambda s: exp.test_mae(exp.pretrained(b, s, 1, False)),
        "uge_st": lambda s: exp.test_mae(exp.finetuned(b, s, 1, False)),
    }
    table = ResultTable(("arm", "n"), meta=_meta(spec, exp, budget=b), how=spec.aggregate)
    cells = [((a, 1), s) for a in arms for s in spec.seeds]
    return _run_cells(cells, lambda key, seed: arms[key[0]](seed), spec.jobs, table)


def ablate_uncertainty(sizes, spec: ProtocolSpec, experiment: Experiment | None = None) -> ResultTable:
    """PT-student and UGE-ST MAE with and without uncertainty weighting, per ensemble size."""
    exp = _experiment(spec, experiment)
    b = _ablation_budget(spec)
    arms = {
        "pt_student_wo": lambda n, s: exp.test_mae(exp.pretrained(b, s, n, False)),
        "pt_student_w": lambda n, s: exp.test_mae(exp.pretrained(b, s, n, True)),
        "uge_st_wo": lambda n, s: exp.test_mae(exp.finetuned(b, s, n, False)),
        "uge_st_w": lambda n, s: exp.test_mae(exp.finetuned(b, s, n, True)),
    }
    table = ResultTable(("arm", "n"), meta=_meta(spec, exp, budget=b), how=spec.aggregate)
    cells = [((a, int(n)), s) for a in arms for n in sizes for s in spec.seeds]
    return _run_cells(cells, lambda key, seed: arms[key[0]](key[1], seed), spec.jobs, table)


def export_heatmap(values, path, fmt=None) -> Path:
    """Write a 2D map as full-precision CSV or 8-bit plain PGM (P2).

    PGM grey levels are min-max scaled to 0..255; a constant map is all 0.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("heatmaps must be 2D")
    if not np.isfinite(arr).all():
        raise ValueError("heatmap values must be finite")
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        text = "\n".join(",".join(repr(float(v)) for v in row) for row in arr) + "\n"
        path.write_text(text)
    elif fmt == "pgm":
        lo, hi = arr.min(), arr.max()
        levels = np.zeros(arr.shape, dtype=np.int64) if hi == lo else np.rint((arr - lo) / (hi - lo) * 255).astype(np.int64)
        h, w = arr.shape
        body = "\n".join(" ".join(str(v) for v in row) for row in levels)
        path.write_text(f"P2\n{w} {h}\n255\n{body}\n")
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}")
    return path


def read_heatmap_csv(path) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")] for line in Path(path).read_text().splitlines() if line])


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w)
