"""Sensor placement, point observation and Voronoi rasterization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

STRATEGIES = ("stratified-jitter", "uniform-random")


@dataclass(frozen=True)
class SensorLayout:
    positions: tuple[tuple[int, int], ...]
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        positions = tuple((int(r), int(c)) for r, c in self.positions)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "grid", (int(h), int(w)))
        if not positions:
            raise ValueError("a sensor layout needs at least one sensor")
        if len(set(positions)) != len(positions):
            raise ValueError("sensor positions must be distinct")
        for r, c in positions:
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"sensor ({r}, {c}) lies outside the {h}x{w} grid")

    def __len__(self):
        return len(self.positions)

    @property
    def rows(self) -> np.ndarray:
        return np.array([r for r, _ in self.positions], dtype=np.int64)

    @property
    def cols(self) -> np.ndarray:
        return np.array([c for _, c in self.positions], dtype=np.int64)


def _near_square(count):
    """Factor ``count`` as rows x cols with rows <= cols as close as possible."""
    r = int(math.isqrt(count))
    while count % r:
        r -= 1
    return r, count // r


def _edges(n, parts):
    return [round(i * n / parts) for i in range(parts + 1)]


def place_sensors(grid, count, strategy="stratified-jitter", seed=0) -> SensorLayout:
    """Deterministic sensor layout for ``(strategy, seed)``.

    ``stratified-jitter`` splits the grid into a near-square arrangement of
    ``count`` blocks and puts one sensor at a random cell of each block.
    ``uniform-random`` samples ``count`` distinct cells without replacement.
    """
    h, w = int(grid[0]), int(grid[1])
    if count < 1:
        raise ValueError("need at least one sensor")
    if count > h * w:
        raise ValueError(f"cannot place {count} sensors on a {h}x{w} grid")
    rng = np.random.default_rng(seed)
    if strategy == "uniform-random":
        cells = rng.choice(h * w, size=count, replace=False)
        return SensorLayout(tuple(divmod(int(c), w) for c in cells), (h, w))
    if strategy != "stratified-jitter":
        raise ValueError(f"unknown placement strategy {strategy!r}; choose from {STRATEGIES}")
    n_r, n_c = _near_square(count)
    if n_c > w or n_r > h:
        n_r, n_c = n_c, n_r
    if n_c > w or n_r > h:
        raise ValueError(f"cannot stratify {count} sensors on a {h}x{w} grid")
    row_edges, col_edges = _edges(h, n_r), _edges(w, n_c)
    positions = []
    for i in range(n_r):
        for j in range(n_c):
            r = int(rng.integers(row_edges[i], row_edges[i + 1]))
            c = int(rng.integers(col_edges[j], col_edges[j + 1]))
            positions.append((r, c))
    return SensorLayout(tuple(positions), (h, w))


def observe(field, layout: SensorLayout) -> np.ndarray:
    """Field values at the sensor positions, in layout order.

    Accepts a single (H, W) field or a stack of shape (N, H, W).
    """
    field = np.asarray(field, dtype=np.float64)
    if field.shape[-2:] != layout.grid:
        raise ValueError(f"field grid {field.shape[-2:]} does not match layout grid {layout.grid}")
    return field[..., layout.rows, layout.cols]


def nearest_sensor_map(layout: SensorLayout) -> np.ndarray:
    """Index of the nearest sensor for every grid cell (ties go to the lower index)."""
    h, w = layout.grid
    return kernels.voronoi_assign(layout.rows, layout.cols, h, w)


def voronoi_encode(obs, layout: SensorLayout, grid=None) -> np.ndarray:
    """Fill every grid cell with the value of its nearest sensor."""
    if grid is not None and tuple(grid) != layout.grid:
        raise ValueError(f"grid {tuple(grid)} does not match layout grid {layout.grid}")
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != len(layout):
        raise ValueError(f"{obs.shape[-1]} observations for {len(layout)} sensors")
    return obs[..., nearest_sensor_map(layout)]
