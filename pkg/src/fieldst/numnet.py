"""Dense feedforward network with hand-written backprop, L1 losses, AdamW and
a cosine-annealing-with-warm-restarts learning rate schedule.

Everything runs in float64. Parameters are plain numpy arrays so a model can
be copied, hashed or serialized without framework machinery.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

LEAKY_SLOPE = 0.01

CHECKPOINT_MAGIC = b"FSNN"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an array does not have the shape a layer expects."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by :func:`adamw_step` when a gradient holds NaN or inf."""


@dataclass
class DenseNet:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "leaky_relu"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if any(int(s) <= 0 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")
        if self.activation != "leaky_relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("need one weight matrix and one bias vector per layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[k + 1], self.layer_sizes[k])
            if w.shape != expected or b.shape != (expected[0],):
                raise ShapeError(
                    f"layer {k}: weight {w.shape} / bias {b.shape}, expected {expected} / ({expected[0]},)"
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in the order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def copy(self) -> DenseNet:
        return DenseNet(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.parameters())

    def __call__(self, x):
        return forward(self, x)


def init_net(layer_sizes, rng) -> DenseNet:
    """Glorot-uniform weights, zero biases."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(list(layer_sizes), weights, biases)


def _activate(z):
    out = np.empty_like(z)
    kernels.leaky_relu(z.reshape(-1), out.reshape(-1), LEAKY_SLOPE)
    return out


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.layer_sizes[0]:
        raise ShapeError(f"input of shape {x.shape} does not match input layer size {net.layer_sizes[0]}")
    return np.ascontiguousarray(xb), single


def _forward_cache(net, xb):
    pre = []
    acts = [xb]
    a = xb
    last = net.n_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        if k == last:
            a = z
        else:
            pre.append(z)
            a = _activate(z)
            acts.append(a)
    return a, acts, pre


def forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate the network on one input vector or a (batch, inputs) matrix."""
    xb, single = _as_batch(net, x)
    out, _, _ = _forward_cache(net, xb)
    return out[0] if single else out


def backward(net: DenseNet, x, upstream_grad, cache=None) -> list[np.ndarray]:
    """Gradients of ``sum(upstream_grad * forward(net, x))`` w.r.t. every parameter.

    Returned in :meth:`DenseNet.parameters` order. For a batch the per-sample
    contributions are summed. ``cache`` lets a caller reuse the activations
    of a forward pass it already ran via :func:`forward_with_cache`.
    """
    xb, single = _as_batch(net, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != (xb.shape[0], net.layer_sizes[-1]):
        raise ShapeError(f"upstream gradient of shape {np.shape(upstream_grad)} does not match output")
    if cache is None:
        _, acts, pre = _forward_cache(net, xb)
    else:
        acts, pre = cache
    grads: list[np.ndarray] = [None] * (2 * net.n_layers)  # type: ignore[list-item]
    delta = np.array(g, dtype=np.float64, order="C")
    for k in range(net.n_layers - 1, -1, -1):
        grads[2 * k] = delta.T @ acts[k]
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ net.weights[k]
            kernels.leaky_relu_grad(pre[k - 1].reshape(-1), delta.reshape(-1), LEAKY_SLOPE)
    return grads


def forward_with_cache(net: DenseNet, x):
    xb, _ = _as_batch(net, x)
    out, acts, pre = _forward_cache(net, xb)
    return out, (acts, pre)


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    if pred.size == 0:
        raise ShapeError("empty prediction")
    return pred, target


def weighted_l1_loss(pred, target, weight_map):
    """Mean of ``W * |target - pred|`` over all entries, and its gradient w.r.t. ``pred``.

    ``pred`` may be a single flattened field or a batch of them; the mean runs
    over every entry, so a batch loss is the average of per-sample losses.
    """
    pred, target = _check_pair(pred, target)
    weight = np.broadcast_to(np.asarray(weight_map, dtype=np.float64), pred.shape)
    if not np.all((weight >= 0.0) & (weight <= 1.0)):
        raise ValueError("weight map entries must lie in [0, 1]")
    return _l1_terms(pred, target, weight)


def l1_loss(pred, target):
    """Mean absolute error over all entries and its (sub)gradient, sign(0) = 0."""
    pred, target = _check_pair(pred, target)
    return _l1_terms(pred, target, np.ones(pred.shape))


def _l1_terms(pred, target, weight):
    n = pred.size
    terms = np.empty(n)
    grad = np.empty(n)
    kernels.weighted_l1_terms(
        np.ascontiguousarray(pred).reshape(-1),
        np.ascontiguousarray(target).reshape(-1),
        np.ascontiguousarray(weight).reshape(-1),
        terms,
        grad,
        1.0 / n,
    )
    return float(terms.sum() / n), grad.reshape(pred.shape)


@dataclass
class OptimState:
    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **hyper) -> OptimState:
        return cls(
            exp_avg=[np.zeros_like(p) for p in params],
            exp_avg_sq=[np.zeros_like(p) for p in params],
            **hyper,
        )


def adamw_step(params, grads, state: OptimState, lr: float | None = None):
    """Apply one AdamW update in place and return ``(params, state)``.

    Weight decay is decoupled (applied as ``p *= 1 - lr * wd``) and the
    moment estimates are bias corrected. All gradients are validated before
    anything is touched, so a rejected step leaves params and state intact.
    """
    lr = state.base_lr if lr is None else float(lr)
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if len(params) != len(grads) or len(params) != len(state.exp_avg):
        raise ShapeError("params, grads and optimizer state must align")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError("non-finite gradient; update rejected")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        kernels.adamw_update(
            p.reshape(-1),
            np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
            m.reshape(-1),
            v.reshape(-1),
            lr,
            state.beta1,
            state.beta2,
            state.eps,
            state.weight_decay,
            bc1,
            bc2,
        )
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    lr_max: float = 1e-3
    lr_min: float = 0.0
    T_0: int = 10
    T_mult: int = 2

    def __post_init__(self):
        if self.T_0 < 1 or self.T_mult < 1:
            raise ValueError("T_0 and T_mult must be positive integers")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Learning rate at a (possibly fractional) epoch."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    start, length = 0, schedule.T_0
    # integer cycle walk: exact restarts, no log() rounding at boundaries
    while epoch >= start + length:
        start += length
        length *= schedule.T_mult
    t_cur = epoch - start
    if t_cur == 0:
        return schedule.lr_max
    lr = schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * t_cur / length))
    return min(max(lr, schedule.lr_min), schedule.lr_max)


def save_checkpoint(net: DenseNet, path) -> None:
    """Write ``net`` in the FSNN little-endian binary layout."""
    Path(path).write_bytes(checkpoint_bytes(net))


def checkpoint_bytes(net: DenseNet) -> bytes:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(net.layer_sizes)),
        struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes),
    ]
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> DenseNet:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(data: bytes) -> DenseNet:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an FSNN checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported FSNN version {version}")
    sizes = list(struct.unpack_from(f"<{n}I", data, 12))
    offset = 12 + 4 * n
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.astype(np.float64).reshape(fan_out, fan_in))
        biases.append(b.astype(np.float64))
    if offset != len(data):
        raise ValueError("trailing bytes in FSNN checkpoint")
    return DenseNet(sizes, weights, biases)
