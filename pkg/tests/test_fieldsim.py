import json

import numpy as np
import pytest

from fieldst.fieldsim import (
    Dataset,
    GenConfig,
    Source,
    SourceLayout,
    SolverError,
    build_dataset,
    relative_residual,
    sample_source_layout,
    solve_steady_heat,
)
from fieldst.sensing import place_sensors
from oracles import dense_poisson_solve


def test_layout_deterministic():
    cfg = GenConfig()
    assert sample_source_layout(42, cfg) == sample_source_layout(42, cfg)
    assert sample_source_layout(42, cfg) != sample_source_layout(43, cfg)


def test_exact_source_count():
    cfg = GenConfig(n_sources=(2, 2))
    for seed in range(20):
        assert len(sample_source_layout(seed, cfg).sources) == 2


def test_rectangles_in_bounds_sweep():
    for grid in ((64, 64), (5, 9), (3, 3)):
        cfg = GenConfig(grid=grid)
        h, w = grid
        for seed in range(1000 if grid == (64, 64) else 200):
            layout = sample_source_layout(seed, cfg)
            assert 1 <= len(layout.sources) <= cfg.n_sources[1]
            for s in layout.sources:
                assert 0 <= s.x0 < s.x1 <= w and 0 <= s.y0 < s.y1 <= h
                assert 0.5 <= s.intensity <= 2.0


def test_degenerate_grid_rejected():
    with pytest.raises(ValueError):
        sample_source_layout(0, GenConfig(grid=(2, 5)))


def _layout(sources, grid, boundary=0.0):
    return SourceLayout(tuple(Source(*s) for s in sources), boundary, grid)


def test_zero_source_constant_field():
    t = solve_steady_heat(_layout([], (10, 12), 0.3), 1e-8)
    assert np.all(t == 0.3)


def test_centered_source_matches_direct_solve():
    layout = _layout([(4, 4, 5, 5, 1.0)], (9, 9))
    t = solve_steady_heat(layout, 1e-12)
    ref = dense_poisson_solve(layout.source_field(), 0.0)
    assert np.max(np.abs(t - ref)) <= 1e-9


def test_nonzero_boundary_matches_direct_solve():
    layout = _layout([(1, 2, 4, 5, 1.5), (5, 5, 7, 6, 0.7)], (8, 9), boundary=0.4)
    t = solve_steady_heat(layout, 1e-12)
    assert np.max(np.abs(t - dense_poisson_solve(layout.source_field(), 0.4))) <= 1e-9


def test_mirror_symmetry():
    w = 21
    layout = _layout([(3, 4, 7, 9, 1.2), (w - 7, 4, w - 3, 9, 1.2), (9, 12, 12, 15, 0.8)], (17, w))
    t = solve_steady_heat(layout)
    assert np.max(np.abs(t - t[:, ::-1])) <= 1e-9


def test_linearity():
    base = [(2, 3, 6, 8, 0.9), (8, 2, 12, 5, 1.7)]
    t1 = solve_steady_heat(_layout(base, (14, 15)), 1e-12)
    t2 = solve_steady_heat(_layout([(*s[:4], 2 * s[4]) for s in base], (14, 15)), 1e-12)
    np.testing.assert_allclose(t2, 2 * t1, rtol=1e-9, atol=1e-12)


def test_maximum_principle_and_residual():
    cfg = GenConfig(grid=(24, 20), boundary_value=0.25)
    for seed in range(25):
        layout = sample_source_layout(seed, cfg)
        t = solve_steady_heat(layout, 1e-8)
        assert np.all(t[1:-1, 1:-1] >= 0.25)
        assert np.all(t[0] == 0.25) and np.all(t[:, -1] == 0.25)
        assert relative_residual(t, layout.source_field()) <= 1e-8


def test_solver_error_on_iteration_cap():
    layout = _layout([(3, 3, 8, 8, 1.0)], (30, 30))
    with pytest.raises(SolverError) as exc:
        solve_steady_heat(layout, 1e-8, max_iter=2)
    assert exc.value.residual > 1e-8


def test_bad_tolerance():
    with pytest.raises(ValueError):
        solve_steady_heat(_layout([], (4, 4)), 0.0)


def test_dataset_invariants(small_dataset):
    ds = small_dataset
    assert ds.counts() == {"labeled": 8, "unlabeled": 24, "test": 8}
    ids = [set(ds.split_ids(s).tolist()) for s in ("labeled", "unlabeled", "test")]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    lab = ds.normalize(ds.split_fields("labeled"))
    assert lab.min() == 0.0 and lab.max() == 1.0
    for f in ds.fields:
        q_free_boundary = np.concatenate([f[0], f[-1], f[:, 0], f[:, -1]])
        assert np.all(q_free_boundary == 0.0)
    for k in range(len(ds.ids)):
        layout = sample_source_layout([11, int(ds.ids[k])], GenConfig(grid=(12, 12), n_sources=(1, 3)))
        assert relative_residual(ds.fields[k], layout.source_field()) <= 1e-8
    assert np.array_equal(ds.observations, ds.fields[:, ds.layout.rows, ds.layout.cols])


def test_dataset_file_round_trip(tmp_path, small_dataset):
    path = small_dataset.save(tmp_path / "d.fsrd")
    raw = path.read_bytes()
    assert raw[:4] == b"FSRD"
    back = Dataset.load(path)
    assert back.to_bytes() == raw
    assert np.array_equal(back.fields, small_dataset.fields)
    assert np.array_equal(back.observations, small_dataset.observations)
    assert back.layout == small_dataset.layout
    assert (back.shift, back.scale) == (small_dataset.shift, small_dataset.scale)
    manifest = json.loads(path.with_suffix(".json").read_text())
    assert manifest["counts"] == {"labeled": 8, "unlabeled": 24, "test": 8}
    assert manifest["grid"] == [12, 12]


def test_dataset_header_layout(small_dataset):
    raw = small_dataset.to_bytes()
    assert np.frombuffer(raw, "<u4", count=7, offset=4).tolist() == [1, 12, 12, 4, 8, 24, 8]
    rec = 8 + 8 * 4 + 8 * 144 + 1
    assert len(raw) == 32 + 8 * 4 + 40 * rec + 16


def test_dataset_deterministic_bytes(tmp_path):
    cfg = GenConfig(grid=(10, 10))
    layout = place_sensors((10, 10), 4, seed=1)
    a = build_dataset(3, 4, 2, layout, 5, cfg, out=tmp_path / "a.fsrd")
    b = build_dataset(3, 4, 2, layout, 5, cfg, out=tmp_path / "b.fsrd", jobs=3)
    assert (tmp_path / "a.fsrd").read_bytes() == (tmp_path / "b.fsrd").read_bytes()
    assert a.digest() == b.digest()


def test_dataset_rejects_mismatched_grid():
    with pytest.raises(ValueError):
        build_dataset(1, 0, 0, place_sensors((8, 8), 2), 0, GenConfig(grid=(10, 10)))


def test_dataset_rejects_corruption(small_dataset):
    raw = small_dataset.to_bytes()
    with pytest.raises(ValueError):
        Dataset.from_bytes(raw[:-1])
    with pytest.raises(ValueError):
        Dataset.from_bytes(b"XXXX" + raw[4:])
