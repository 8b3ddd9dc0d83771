from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldst.evaluation import (
    Experiment,
    ProtocolSpec,
    ResultTable,
    ablate_ensemble,
    ablate_pretrain,
    ablate_uncertainty,
    error_map,
    export_heatmap,
    mae,
    read_heatmap_csv,
    read_pgm,
    run_protocol,
)
from fieldst.numnet import forward


def test_mae_examples():
    t = np.arange(12.0).reshape(2, 2, 3)
    assert mae(t, t) == 0.0
    assert mae(t + 0.5, t) == 0.5
    p = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0]])
    tr = np.array([[1.0, 1.0, 1.0, 1.0], [1.0, -1.0, 3.0, 0.0]])
    # sample MAEs: (0+1+2+3)/4 = 1.5 and (1+1+3+0)/4 = 1.25
    assert mae(p, tr) == pytest.approx(1.375, abs=1e-15)


def test_mae_errors():
    with pytest.raises(ValueError):
        mae(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        mae(np.zeros((0, 3)), np.zeros((0, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 10), st.floats(0.01, 100), st.integers(0, 2**31))
def test_mae_permutation_and_scale(n, m, alpha, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(n, m)), rng.normal(size=(n, m))
    base = mae(p, t)
    perm_s, perm_p = rng.permutation(n), rng.permutation(m)
    assert mae(p[perm_s][:, perm_p], t[perm_s][:, perm_p]) == pytest.approx(base, rel=1e-12)
    assert mae(alpha * p, alpha * t) == pytest.approx(alpha * base, rel=1e-12)
    assert base >= 0


def test_error_map_elementwise(rng):
    p, t = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    e = error_map(p, t)
    for i in range(4):
        for j in range(5):
            assert e[i, j] == abs(p[i, j] - t[i, j])


def test_heatmap_csv_round_trip(tmp_path, rng):
    v = rng.normal(size=(6, 7)) * 1e3
    v[0, 0] = 1 / 3
    path = export_heatmap(v, tmp_path / "a.csv")
    assert np.array_equal(read_heatmap_csv(path), v)


def test_heatmap_pgm(tmp_path):
    path = export_heatmap(np.full((3, 4), 2.0), tmp_path / "c.pgm")
    img = read_pgm(path)
    assert img.shape == (3, 4) and len(np.unique(img)) == 1
    ramp = export_heatmap(np.array([[0.0, 0.5, 1.0]]), tmp_path / "r.pgm")
    assert ramp.read_text() == "P2\n3 1\n255\n0 128 255\n"


def test_heatmap_deterministic_and_checks(tmp_path, rng):
    v = rng.normal(size=(5, 5))
    a = export_heatmap(v, tmp_path / "a.pgm").read_bytes()
    b = export_heatmap(v, tmp_path / "b.pgm").read_bytes()
    assert a == b
    with pytest.raises(ValueError):
        export_heatmap(np.array([[np.nan]]), tmp_path / "n.csv")
    with pytest.raises(ValueError):
        export_heatmap(v, tmp_path / "x.png")


def test_result_table_csv():
    t = ResultTable(("method", "budget"))
    t.add(("supervised", 8), 2, 0.25)
    t.add(("supervised", 8), 1, 0.5)
    t.add(("uge-st", 8), 1, 0.125)
    assert t.to_csv() == "method,budget,seed,mae\nsupervised,8,1,0.5\nsupervised,8,2,0.25\nuge-st,8,1,0.125\n"
    assert t.aggregate("supervised", 8) == 0.375


def _spec(ds, tiny_config, **kw):
    return ProtocolSpec(ds, label_budgets=[4, 8], methods=["supervised"], seeds=[1], train=tiny_config, **kw)


def test_nested_budgets(small_dataset, tiny_config):
    exp = Experiment(small_dataset, tiny_config)
    for seed in (1, 2):
        small = exp.subset(4, seed)
        big = exp.subset(8, seed)
        assert np.array_equal(big[:4], small)
    with pytest.raises(ValueError):
        exp.subset(9, 1)


def test_protocol_table(small_dataset, tiny_config, tmp_path):
    spec = _spec(small_dataset, tiny_config)
    table = run_protocol(spec)
    assert table.keys() == [("supervised", 4), ("supervised", 8)]
    assert all(r["mae"] >= 0 for r in table.rows)
    again = run_protocol(spec)
    assert table.to_csv() == again.to_csv()
    csv_path, json_path = table.save(tmp_path / "t.csv")
    assert csv_path.read_text().startswith("method,budget,seed,mae\n")
    assert '"dataset_sha256"' in json_path.read_text()


def test_protocol_cell_is_reproducible_alone(small_dataset, tiny_config):
    spec = ProtocolSpec(small_dataset, [4, 8], ["supervised", "self-training", "uge-st"], [1, 2], train=tiny_config)
    full = run_protocol(spec)
    single = run_protocol(replace(spec, label_budgets=[8], methods=["uge-st"], seeds=[2]))
    assert single.values("uge-st", 8) == [r["mae"] for r in full.rows if r["method"] == "uge-st" and r["budget"] == 8 and r["seed"] == 2]
    concurrent = run_protocol(replace(spec, jobs=3))
    assert concurrent.to_csv() == full.to_csv()


def test_protocol_records_failures(small_dataset, tiny_config, monkeypatch):
    exp = Experiment(small_dataset, tiny_config)

    def boom(*a, **k):
        raise RuntimeError("diverged")

    monkeypatch.setattr(exp, "self_training", boom)
    spec = ProtocolSpec(small_dataset, [4], ["supervised", "self-training"], [1], train=tiny_config)
    table = run_protocol(spec, exp)
    assert len(table.failed) == 1 and "diverged" in table.failed[0]["error"]
    assert np.isfinite(table.values("supervised", 4)[0])


def test_protocol_spec_validation(small_dataset):
    with pytest.raises(ValueError):
        ProtocolSpec(small_dataset, label_budgets=[8, 4])
    with pytest.raises(ValueError):
        ProtocolSpec(small_dataset, seeds=[])
    with pytest.raises(ValueError):
        ProtocolSpec(small_dataset, methods=["co-training"])
    with pytest.raises(ValueError):
        run_protocol(ProtocolSpec(small_dataset, label_budgets=[100], methods=["supervised"]))


def test_ablate_ensemble_shape(small_dataset, tiny_config):
    spec = _spec(small_dataset, tiny_config)
    exp = Experiment(small_dataset, tiny_config)
    table = ablate_ensemble([1, 2], spec, exp)
    assert {k for k in table.keys()} == {(a, n) for a in ("pseudo_label", "pt_student", "uge_st") for n in (1, 2)}
    # n = 1 points coincide with the single-teacher arms
    pre = ablate_pretrain(spec, exp)
    for arm in ("pseudo_label", "pt_student", "uge_st"):
        assert table.values(arm, 1) == pre.values(arm, 1)


def test_pseudo_label_mae_uses_unlabeled_truth(small_dataset, tiny_config):
    exp = Experiment(small_dataset, tiny_config)
    [t] = exp.teachers(8, 1, 1)
    pred = small_dataset.denormalize(forward(t, exp.x["unlabeled"])).reshape(-1, 12, 12)
    assert exp.pseudo_mae(8, 1, 1) == pytest.approx(mae(pred, small_dataset.split_fields("unlabeled")), rel=1e-12)


def test_ablate_uncertainty_identical_teachers(small_dataset, tiny_config, monkeypatch):
    """Identical teachers give W = 1, so the with/without arms coincide."""
    exp = Experiment(small_dataset, tiny_config)
    t0 = exp.teacher(8, 1, 0)
    monkeypatch.setattr(exp, "teacher", lambda budget, seed, k: t0)
    table = ablate_uncertainty([3], _spec(small_dataset, tiny_config), exp)
    assert table.values("pt_student_w", 3) == table.values("pt_student_wo", 3)
    assert table.values("uge_st_w", 3) == table.values("uge_st_wo", 3)


def test_ablate_pretrain_arms(small_dataset, tiny_config):
    table = ablate_pretrain(_spec(small_dataset, tiny_config))
    assert [k[0] for k in table.keys()] == ["pseudo_label", "self_training", "pt_student", "uge_st"]
