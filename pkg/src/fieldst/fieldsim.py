"""Synthetic steady-state temperature fields and the FSRD dataset format.

Each sample is a set of rectangular heat sources on a grid with a fixed
Dirichlet boundary. The field solves the 5-point discrete Poisson problem
``-lap(T) = q`` (unit grid spacing) by conjugate gradients.
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .sensing import SensorLayout, observe

DATASET_MAGIC = b"FSRD"
DATASET_VERSION = 1
SPLITS = ("labeled", "unlabeled", "test")
SPLIT_TAGS = {name: tag for tag, name in enumerate(SPLITS)}


class SolverError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class GenConfig:
    grid: tuple[int, int] = (64, 64)
    n_sources: tuple[int, int] = (2, 6)
    intensity: tuple[float, float] = (0.5, 2.0)
    boundary_value: float = 0.0
    # rectangle side lengths, as fractions of the grid dimension
    min_side: float = 1 / 16
    max_side: float = 1 / 4
    tol: float = 1e-8

    @classmethod
    def from_dict(cls, d) -> GenConfig:
        d = dict(d)
        for key in ("grid", "n_sources", "intensity"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Source:
    x0: int
    y0: int
    x1: int
    y1: int
    intensity: float


@dataclass(frozen=True)
class SourceLayout:
    """Heat sources as half-open cell rectangles: columns ``[x0, x1)``, rows ``[y0, y1)``."""

    sources: tuple[Source, ...]
    boundary_value: float
    grid: tuple[int, int]

    def source_field(self) -> np.ndarray:
        q = np.zeros(self.grid)
        for s in self.sources:
            q[s.y0:s.y1, s.x0:s.x1] += s.intensity
        return q


def _check_grid(grid):
    h, w = int(grid[0]), int(grid[1])
    if h < 3 or w < 3:
        raise ValueError(f"grid must be at least 3x3, got {h}x{w}")
    return h, w


def sample_source_layout(rng_seed, gen_config: GenConfig = GenConfig()) -> SourceLayout:
    """Random rectangular sources strictly inside the grid; deterministic in the seed."""
    h, w = _check_grid(gen_config.grid)
    lo, hi = gen_config.n_sources
    if not 1 <= lo <= hi:
        raise ValueError(f"bad source count range {gen_config.n_sources}")
    rng = np.random.default_rng(rng_seed)
    sources = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        dims = []
        for n in (w, h):
            interior = n - 2
            smin = max(1, min(interior, round(gen_config.min_side * n)))
            smax = max(smin, min(interior, round(gen_config.max_side * n)))
            side = int(rng.integers(smin, smax + 1))
            start = int(rng.integers(1, n - 1 - side + 1))
            dims.append((start, start + side))
        (x0, x1), (y0, y1) = dims
        intensity = float(rng.uniform(*gen_config.intensity))
        sources.append(Source(x0, y0, x1, y1, intensity))
    return SourceLayout(tuple(sources), float(gen_config.boundary_value), (h, w))


def relative_residual(temperature, q) -> float:
    """``||q + lap(T)|| / ||q||`` over interior cells, computed directly from T."""
    t = np.asarray(temperature)
    lap = t[:-2, 1:-1] + t[2:, 1:-1] + t[1:-1, :-2] + t[1:-1, 2:] - 4.0 * t[1:-1, 1:-1]
    r = q[1:-1, 1:-1] + lap
    qn = np.linalg.norm(q[1:-1, 1:-1])
    rn = np.linalg.norm(r)
    if qn == 0.0:
        return 0.0 if rn == 0.0 else float("inf")
    return float(rn / qn)


def _cg(rhs, tol, max_iter):
    """Conjugate gradients for the zero-Dirichlet 5-point operator on ``rhs``'s grid."""
    x = np.zeros_like(rhs)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return x, 0, 0.0
    r = rhs.copy()
    p = r.copy()
    ap = np.empty_like(rhs)
    rs = float(np.vdot(r, r))
    # iterate a bit past tol so the independently recomputed residual also passes
    target = 0.25 * tol * bnorm
    for it in range(1, max_iter + 1):
        kernels.neg_laplacian(p, ap)
        alpha = rs / float(np.vdot(p, ap))
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.vdot(r, r))
        if np.sqrt(rs_new) <= target:
            kernels.neg_laplacian(x, ap)
            true_res = np.linalg.norm(rhs - ap) / bnorm
            if true_res <= 0.5 * tol:
                return x, it, true_res
            r = rhs - ap
            p = r.copy()
            rs = float(np.vdot(r, r))
            continue
        p *= rs_new / rs
        p += r
        rs = rs_new
    kernels.neg_laplacian(x, ap)
    return x, max_iter, float(np.linalg.norm(rhs - ap) / bnorm)


def solve_steady_heat(layout: SourceLayout, tol: float = 1e-8, max_iter: int | None = None) -> np.ndarray:
    """Steady temperature for ``layout``; raises :class:`SolverError` if CG stalls."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    h, w = _check_grid(layout.grid)
    q = layout.source_field()
    cap = 10 * h * w if max_iter is None else max_iter
    u, _, res = _cg(np.ascontiguousarray(q[1:-1, 1:-1]), tol, cap)
    t = np.full((h, w), layout.boundary_value)
    t[1:-1, 1:-1] += u
    check = relative_residual(t, q)
    if not check <= tol:
        raise SolverError("steady heat solve did not converge", max(check, res))
    return t


@dataclass
class Dataset:
    """All samples of one generated benchmark, stored in physical units.

    Rows are ordered by sample id; ``split`` tags each row labeled (0),
    unlabeled (1) or test (2). Unlabeled rows keep their true fields, which
    are used only to score pseudo labels.
    """

    ids: np.ndarray
    split: np.ndarray
    observations: np.ndarray
    fields: np.ndarray
    layout: SensorLayout
    shift: float
    scale: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scale <= 0 or not np.isfinite(self.scale):
            raise ValueError("normalization scale must be positive")
        if len(set(self.ids.tolist())) != len(self.ids):
            raise ValueError("sample ids must be unique")
        n = len(self.ids)
        if self.observations.shape != (n, len(self.layout)):
            raise ValueError("observation array does not match sample count / sensor count")
        if self.fields.shape != (n, *self.layout.grid):
            raise ValueError("field array does not match sample count / grid")

    @property
    def grid(self):
        return self.layout.grid

    def counts(self) -> dict:
        return {name: int(np.sum(self.split == tag)) for name, tag in SPLIT_TAGS.items()}

    def _mask(self, name):
        return self.split == SPLIT_TAGS[name]

    def split_ids(self, name):
        return self.ids[self._mask(name)]

    def split_observations(self, name):
        return self.observations[self._mask(name)]

    def split_fields(self, name):
        return self.fields[self._mask(name)]

    def normalize(self, values):
        return (np.asarray(values) - self.shift) / self.scale

    def denormalize(self, values):
        return np.asarray(values) * self.scale + self.shift

    def to_bytes(self) -> bytes:
        h, w = self.grid
        counts = self.counts()
        head = [
            DATASET_MAGIC,
            struct.pack("<IIII", DATASET_VERSION, h, w, len(self.layout)),
            struct.pack("<III", *(counts[s] for s in SPLITS)),
            b"".join(struct.pack("<II", r, c) for r, c in self.layout.positions),
        ]
        body = []
        obs = np.ascontiguousarray(self.observations, dtype="<f8")
        flds = np.ascontiguousarray(self.fields, dtype="<f8").reshape(len(self.ids), -1)
        for k in range(len(self.ids)):
            body.append(struct.pack("<Q", int(self.ids[k])))
            body.append(obs[k].tobytes())
            body.append(flds[k].tobytes())
            body.append(struct.pack("<B", int(self.split[k])))
        tail = struct.pack("<dd", self.shift, self.scale)
        return b"".join(head + body) + tail

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def manifest(self) -> dict:
        return {
            "format": "FSRD",
            "version": DATASET_VERSION,
            "grid": list(self.grid),
            "sensors": [list(p) for p in self.layout.positions],
            "counts": self.counts(),
            "normalization": {"shift": self.shift, "scale": self.scale},
            "sha256": self.digest(),
            **self.meta,
        }

    def save(self, path) -> Path:
        """Write the FSRD file and a sibling ``.json`` manifest."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = self.to_bytes()
        path.write_bytes(data)
        manifest = self.manifest()
        manifest["sha256"] = hashlib.sha256(data).hexdigest()
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_bytes(cls, data: bytes, meta=None) -> Dataset:
        if data[:4] != DATASET_MAGIC:
            raise ValueError("not an FSRD dataset")
        version, h, w, s = struct.unpack_from("<IIII", data, 4)
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported FSRD version {version}")
        counts = struct.unpack_from("<III", data, 20)
        off = 32
        coords = struct.unpack_from(f"<{2 * s}I", data, off)
        off += 8 * s
        layout = SensorLayout(tuple(zip(coords[0::2], coords[1::2])), (h, w))
        n = sum(counts)
        rec = np.dtype([("id", "<u8"), ("obs", "<f8", (s,)), ("field", "<f8", (h * w,)), ("tag", "u1")])
        if off + rec.itemsize * n + 16 != len(data):
            raise ValueError("FSRD length does not match its header")
        records = np.frombuffer(data, dtype=rec, count=n, offset=off)
        off += rec.itemsize * n
        shift, scale = struct.unpack_from("<dd", data, off)
        ds = cls(
            ids=records["id"].astype(np.int64),
            split=records["tag"].astype(np.uint8),
            observations=records["obs"].astype(np.float64),
            fields=records["field"].astype(np.float64).reshape(n, h, w),
            layout=layout,
            shift=shift,
            scale=scale,
            meta=dict(meta or {}),
        )
        if tuple(ds.counts()[k] for k in SPLITS) != tuple(counts):
            raise ValueError("FSRD split tags disagree with header counts")
        return ds

    @classmethod
    def load(cls, path) -> Dataset:
        path = Path(path)
        meta = {}
        side = path.with_suffix(".json")
        if side.exists():
            manifest = json.loads(side.read_text())
            meta = {k: manifest[k] for k in ("generator", "seed") if k in manifest}
        return cls.from_bytes(path.read_bytes(), meta)


def build_dataset(
    n_labeled: int,
    n_unlabeled: int,
    n_test: int,
    sensor_layout: SensorLayout,
    seed: int,
    gen_config: GenConfig = GenConfig(),
    out=None,
    jobs: int = 1,
) -> Dataset:
    """Solve ``n_labeled + n_unlabeled + n_test`` fields and package them.

    Sample ``i`` uses source-layout seed ``(seed, i)``. Ids run 0..N-1 over
    the labeled, unlabeled and test blocks in that order. Min-max
    normalization statistics come from the labeled fields only.
    """
    counts = (int(n_labeled), int(n_unlabeled), int(n_test))
    if min(counts) < 0:
        raise ValueError("split sizes must be non-negative")
    if tuple(gen_config.grid) != sensor_layout.grid:
        raise ValueError("sensor layout grid differs from generator grid")
    n = sum(counts)

    def solve(i):
        return solve_steady_heat(sample_source_layout([int(seed), i], gen_config), gen_config.tol)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            fields = list(pool.map(solve, range(n)))
    else:
        fields = [solve(i) for i in range(n)]
    h, w = sensor_layout.grid
    fields = np.stack(fields) if fields else np.zeros((0, h, w))
    split = np.repeat(np.arange(3, dtype=np.uint8), counts)
    labeled = fields[split == 0]
    if len(labeled):
        shift = float(labeled.min())
        scale = float(labeled.max() - labeled.min())
        if scale == 0.0:
            raise ValueError("labeled fields are constant; cannot normalize")
    else:
        shift, scale = 0.0, 1.0
    ds = Dataset(
        ids=np.arange(n, dtype=np.int64),
        split=split,
        observations=observe(fields, sensor_layout),
        fields=fields,
        layout=sensor_layout,
        shift=shift,
        scale=scale,
        meta={"generator": _gen_meta(gen_config), "seed": int(seed)},
    )
    if out is not None:
        ds.save(out)
    return ds


def _gen_meta(cfg: GenConfig):
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
