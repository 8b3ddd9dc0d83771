"""Supervised, self-training and uncertainty guided ensemble self-training.

All trainers work on normalized arrays: inputs ``x`` of shape (N, sensors)
and flattened targets ``y`` of shape (N, H*W). Every source of randomness
(initialization, shuffling) is derived from ``TrainConfig.seed`` so a run
is a pure function of its data and config.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .numnet import (
    DenseNet,
    LrSchedule,
    OptimState,
    adamw_step,
    backward,
    forward,
    forward_with_cache,
    init_net,
    l1_loss,
    lr_at,
    save_checkpoint,
    weighted_l1_loss,
)

METHODS = ("supervised", "self-training", "uge-st")

PSEUDO_MAGIC = b"FSPL"
PSEUDO_VERSION = 1

# seed-derivation tags; changing these changes every trained model
_TEACHER = 1
_STUDENT = 2
_FINETUNE = 3
_INIT = 0
_SHUFFLE = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    schedule: LrSchedule = LrSchedule()
    seed: int = 0
    method: str = "uge-st"
    ensemble_size: int = 3
    use_uncertainty: bool = True
    use_pretrain_finetune: bool = True
    hidden: tuple[int, ...] = (64, 256)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    jobs: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.epochs < 0 or self.batch_size < 1 or self.ensemble_size < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and ensemble_size >= 1 required")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def layer_sizes(self, n_in, n_out):
        return [int(n_in), *map(int, self.hidden), int(n_out)]

    def optimizer(self, params) -> OptimState:
        return OptimState.for_params(
            params,
            base_lr=self.schedule.lr_max,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("schedule"), dict):
            d["schedule"] = LrSchedule(**d["schedule"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def derive_seed(seed: int, *tags: int) -> int:
    """Stable 63-bit child seed for ``(seed, *tags)``."""
    state = np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1] & 0x7FFFFFFF) << 32)


def teacher_seed(seed: int, k: int) -> int:
    return derive_seed(seed, _TEACHER, k)


def _rngs(seed):
    return np.random.default_rng([seed, _INIT]), np.random.default_rng([seed, _SHUFFLE])


def _check_xy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("labeled set is empty")
    if len(x) != len(y):
        raise ValueError("inputs and targets differ in length")
    return x, y.reshape(len(y), -1)


def _batches(rng, n, batch_size):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _cycle_batches(rng, n, batch_size):
    while True:
        yield from _batches(rng, n, batch_size)


def _step(net, state, xb, lr, loss_fn, history):
    out, cache = forward_with_cache(net, xb)
    loss, grad = loss_fn(out)
    adamw_step(net.parameters(), backward(net, xb, grad, cache), state, lr)
    if history is not None:
        history.append(loss)


def _fit(net, x, targets, weights, config, shuffle_rng, history):
    """Minibatch AdamW over one dataset; plain L1 when ``weights`` is None."""
    state = config.optimizer(net.parameters())
    n = len(x)
    for epoch in range(config.epochs):
        batches = _batches(shuffle_rng, n, config.batch_size)
        for j, idx in enumerate(batches):
            lr = config_lr(config, epoch, j, len(batches))
            if weights is None:
                loss_fn = lambda out, t=targets[idx]: l1_loss(out, t)  # noqa: E731
            else:
                loss_fn = lambda out, t=targets[idx], w=weights[idx]: weighted_l1_loss(out, t, w)  # noqa: E731
            _step(net, state, x[idx], lr, loss_fn, history)
    return net


def config_lr(config: TrainConfig, epoch: int, step: int, steps_per_epoch: int) -> float:
    return lr_at(config.schedule, epoch + step / steps_per_epoch)


def train_supervised(x, y, config: TrainConfig, history: list | None = None) -> DenseNet:
    """Fit a freshly initialized net to labeled pairs with plain L1."""
    x, y = _check_xy(x, y)
    init_rng, shuffle_rng = _rngs(config.seed)
    net = init_net(config.layer_sizes(x.shape[1], y.shape[1]), init_rng)
    return _fit(net, x, y, None, config, shuffle_rng, history)


def train_ensemble_teachers(x, y, config: TrainConfig, members=None) -> list[DenseNet]:
    """``ensemble_size`` supervised teachers; member k is seeded by ``(seed, k)``.

    Members see the full labeled set and differ only in initialization and
    shuffle order. With ``config.jobs > 1`` they train concurrently.
    """
    ks = range(config.ensemble_size) if members is None else members
    cfgs = [replace(config, seed=teacher_seed(config.seed, k)) for k in ks]
    if config.jobs > 1 and len(cfgs) > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            return list(pool.map(lambda c: train_supervised(x, y, c), cfgs))
    return [train_supervised(x, y, c) for c in cfgs]


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    uncertainty: np.ndarray
    weights: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        if not (self.labels.shape == self.uncertainty.shape == self.weights.shape):
            raise ValueError("pseudo labels, uncertainty and weights must share a shape")
        if np.any(self.uncertainty < 0):
            raise ValueError("uncertainty must be non-negative")
        if np.any((self.weights < 0) | (self.weights > 1)):
            raise ValueError("weights must lie in [0, 1]")
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def to_bytes(self, grid) -> bytes:
        h, w = grid
        n = len(self)
        parts = [PSEUDO_MAGIC, struct.pack("<IIII", PSEUDO_VERSION, h, w, n)]
        for k in range(n):
            parts.append(struct.pack("<Q", int(self.ids[k])))
            for arr in (self.labels, self.uncertainty, self.weights):
                parts.append(np.ascontiguousarray(arr[k], dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> PseudoLabelSet:
        if data[:4] != PSEUDO_MAGIC:
            raise ValueError("not a pseudo-label file")
        version, h, w, n = struct.unpack_from("<IIII", data, 4)
        if version != PSEUDO_VERSION:
            raise ValueError(f"unsupported pseudo-label version {version}")
        hw = h * w
        rec = np.dtype([("id", "<u8"), ("y", "<f8", (hw,)), ("u", "<f8", (hw,)), ("w", "<f8", (hw,))])
        if 20 + rec.itemsize * n != len(data):
            raise ValueError("pseudo-label file length does not match its header")
        r = np.frombuffer(data, dtype=rec, count=n, offset=20)
        return cls(
            r["y"].astype(np.float64), r["u"].astype(np.float64), r["w"].astype(np.float64), r["id"].astype(np.int64)
        )


def ensemble_stats(predictions):
    """Per-entry mean and population variance over the leading (teacher) axis.

    Deviations are taken from the first teacher, so identical teachers give
    exactly that teacher's output and exactly zero variance.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    base = preds[0]
    dev = preds - base
    mean_dev = dev.mean(axis=0)
    var = ((dev - mean_dev) ** 2).mean(axis=0)
    return base + mean_dev, var


def uncertainty_weights(uncertainty) -> np.ndarray:
    """``1 - minmax(U)`` per sample (over the last axis); constant U gives all ones."""
    u = np.asarray(uncertainty, dtype=np.float64)
    if np.any(u < 0):
        raise ValueError("uncertainty must be non-negative")
    lo = u.min(axis=-1, keepdims=True)
    span = u.max(axis=-1, keepdims=True) - lo
    w = np.ones_like(u)
    varying = np.broadcast_to(span > 0, u.shape)
    safe = np.where(span > 0, span, 1.0)
    w = np.where(varying, 1.0 - (u - lo) / safe, w)
    return np.clip(w, 0.0, 1.0)


def pseudo_label(teachers, unlabeled_x, ids=None) -> PseudoLabelSet:
    """Ensemble-mean pseudo labels with variance uncertainty and derived weights."""
    if not teachers:
        raise ValueError("need at least one teacher")
    preds = [forward(t, unlabeled_x) for t in teachers]
    if len({p.shape for p in preds}) != 1:
        raise ValueError("teachers disagree on output shape")
    labels, var = ensemble_stats(preds)
    return PseudoLabelSet(labels, var, uncertainty_weights(var), ids)


def pretrain_student(pseudo: PseudoLabelSet, unlabeled_x, config: TrainConfig, history: list | None = None) -> DenseNet:
    """Train a fresh student on pseudo labels only, weighted by uncertainty.

    With ``use_uncertainty`` off every pixel gets weight one.
    """
    if len(pseudo) == 0:
        raise ValueError("pseudo-label set is empty")
    x = np.asarray(unlabeled_x, dtype=np.float64)
    if len(x) != len(pseudo):
        raise ValueError("one observation per pseudo label required")
    weights = pseudo.weights if config.use_uncertainty else np.ones_like(pseudo.labels)
    init_rng, shuffle_rng = _rngs(derive_seed(config.seed, _STUDENT))
    net = init_net(config.layer_sizes(x.shape[1], pseudo.labels.shape[1]), init_rng)
    return _fit(net, x, pseudo.labels, weights, config, shuffle_rng, history)


def finetune_student(student: DenseNet, x, y, config: TrainConfig, history: list | None = None) -> DenseNet:
    """Continue training a copy of ``student`` on labeled data with plain L1.

    Optimizer moments and the learning-rate schedule start fresh.
    """
    x, y = _check_xy(x, y)
    _, shuffle_rng = _rngs(derive_seed(config.seed, _FINETUNE))
    return _fit(student.copy(), x, y, None, config, shuffle_rng, history)


def _fit_joint(net, x_l, y_l, x_u, y_u, w_u, config, history):
    """Each step: one labeled and one unlabeled batch, loss = mean L1 + mean weighted L1.

    An epoch is one pass over the unlabeled set; labeled batches cycle
    through reshuffled passes of the labeled set.
    """
    init_rng, shuffle_rng = _rngs(derive_seed(config.seed, _STUDENT))
    if net is None:
        net = init_net(config.layer_sizes(x_l.shape[1], y_l.shape[1]), init_rng)
    lab_rng = np.random.default_rng([derive_seed(config.seed, _STUDENT), 2])
    lab_stream = _cycle_batches(lab_rng, len(x_l), config.batch_size)
    state = config.optimizer(net.parameters())
    for epoch in range(config.epochs):
        batches = _batches(shuffle_rng, len(x_u), config.batch_size)
        for j, idx_u in enumerate(batches):
            idx_l = next(lab_stream)
            lr = config_lr(config, epoch, j, len(batches))
            nl = len(idx_l)
            xb = np.concatenate([x_l[idx_l], x_u[idx_u]])
            out, cache = forward_with_cache(net, xb)
            loss_l, g_l = l1_loss(out[:nl], y_l[idx_l])
            if w_u is None:
                loss_u, g_u = l1_loss(out[nl:], y_u[idx_u])
            else:
                loss_u, g_u = weighted_l1_loss(out[nl:], y_u[idx_u], w_u[idx_u])
            grad = np.concatenate([g_l, g_u])
            adamw_step(net.parameters(), backward(net, xb, grad, cache), state, lr)
            if history is not None:
                history.append(loss_l + loss_u)
    return net


def train_self_training(
    x, y, unlabeled_x, config: TrainConfig, teacher: DenseNet | None = None, history: list | None = None
) -> DenseNet:
    """Vanilla self-training: one teacher, then a student on labeled + pseudo-labeled data.

    ``teacher`` may be injected (e.g. a cached or oracle model); by default
    it is ensemble member 0, i.e. the supervised baseline for this seed.
    """
    x, y = _check_xy(x, y)
    unlabeled_x = np.asarray(unlabeled_x, dtype=np.float64)
    if len(unlabeled_x) == 0:
        return train_supervised(x, y, config, history)
    if teacher is None:
        teacher = train_ensemble_teachers(x, y, config, members=[0])[0]
    pseudo = forward(teacher, unlabeled_x)
    return _fit_joint(None, x, y, unlabeled_x, pseudo, None, config, history)


@dataclass
class UgeStResult:
    student: DenseNet
    teachers: list[DenseNet]
    pseudo: PseudoLabelSet
    pretrained: DenseNet | None = None
    histories: dict = field(default_factory=dict)


def run_uge_st(
    x, y, unlabeled_x, config: TrainConfig, teachers: list[DenseNet] | None = None, unlabeled_ids=None
) -> UgeStResult:
    """Ensemble teachers -> pseudo labels + weights -> pre-train student -> fine-tune.

    With ``use_pretrain_finetune`` off the student is instead trained jointly
    on labeled and (optionally uncertainty weighted) pseudo-labeled batches.
    """
    x, y = _check_xy(x, y)
    unlabeled_x = np.asarray(unlabeled_x, dtype=np.float64)
    if len(unlabeled_x) == 0:
        raise ValueError("unlabeled set is empty")
    if teachers is None:
        teachers = train_ensemble_teachers(x, y, config)
    elif len(teachers) != config.ensemble_size:
        raise ValueError(f"got {len(teachers)} teachers for ensemble_size={config.ensemble_size}")
    pseudo = pseudo_label(teachers, unlabeled_x, unlabeled_ids)
    hist: dict = {"pretrain": [], "finetune": []}
    if not config.use_pretrain_finetune:
        w = pseudo.weights if config.use_uncertainty else None
        student = _fit_joint(None, x, y, unlabeled_x, pseudo.labels, w, config, hist["pretrain"])
        return UgeStResult(student, teachers, pseudo, None, hist)
    pretrained = pretrain_student(pseudo, unlabeled_x, config, hist["pretrain"])
    student = finetune_student(pretrained, x, y, config, hist["finetune"])
    return UgeStResult(student, teachers, pseudo, pretrained, hist)


def save_artifacts(result: UgeStResult, directory, config: TrainConfig, grid, extra=None) -> dict:
    """Write teachers, pseudo labels, students and config under ``directory``."""
    d = Path(directory)
    (d / "teachers").mkdir(parents=True, exist_ok=True)
    (d / "pseudo").mkdir(parents=True, exist_ok=True)
    paths = {}
    for k, t in enumerate(result.teachers):
        p = d / "teachers" / f"member_{k}.fsnn"
        save_checkpoint(t, p)
        paths[f"teacher_{k}"] = str(p)
    p = d / "pseudo" / "labels.fsrd-pl"
    p.write_bytes(result.pseudo.to_bytes(grid))
    paths["pseudo"] = str(p)
    if result.pretrained is not None:
        save_checkpoint(result.pretrained, d / "student_pretrained.fsnn")
        paths["student_pretrained"] = str(d / "student_pretrained.fsnn")
    save_checkpoint(result.student, d / "student_final.fsnn")
    paths["student_final"] = str(d / "student_final.fsnn")
    cfg = {"train": config.to_dict(), **(extra or {})}
    (d / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    paths["config"] = str(d / "config.json")
    return paths
