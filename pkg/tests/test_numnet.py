import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldst.numnet import (
    DenseNet,
    LrSchedule,
    NonFiniteGradientError,
    OptimState,
    ShapeError,
    adamw_step,
    backward,
    checkpoint_bytes,
    checkpoint_from_bytes,
    forward,
    init_net,
    l1_loss,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    weighted_l1_loss,
)
from oracles import fd_gradients, max_relative_error


def test_zero_weights_output_bias(rng):
    net = init_net([3, 5, 2], rng)
    for w in net.weights:
        w[:] = 0.0
    net.biases[-1][:] = [0.5, -2.0]
    assert np.array_equal(forward(net, rng.normal(size=3)), [0.5, -2.0])


def test_single_layer_hand_product():
    net = DenseNet([2, 2], [np.array([[2.0, 0.0], [0.0, 3.0]])], [np.array([1.0, -1.0])])
    assert np.array_equal(forward(net, [1.0, 1.0]), [3.0, 2.0])


def test_benchmark_mlp_output_length():
    sizes = [20, 128, 1280, 4800, 40000]
    net = DenseNet(
        sizes,
        [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
        [np.zeros(o) for o in sizes[1:]],
    )
    assert forward(net, np.ones(20)).shape == (40000,)


def test_forward_rejects_wrong_input(rng):
    net = init_net([3, 4, 2], rng)
    with pytest.raises(ShapeError):
        forward(net, np.ones(4))


def test_batch_matches_rows(rng):
    net = init_net([3, 7, 4], rng)
    x = rng.normal(size=(5, 3))
    batch = forward(net, x)
    for i in range(5):
        np.testing.assert_allclose(batch[i], forward(net, x[i]), rtol=1e-14, atol=1e-15)


def test_invalid_layers():
    with pytest.raises(ValueError):
        DenseNet([3], [], [])
    with pytest.raises(ShapeError):
        DenseNet([2, 3], [np.zeros((2, 3))], [np.zeros(3)])


def test_init_bounds_and_determinism():
    a = init_net([10, 30, 5], 7)
    b = init_net([10, 30, 5], 7)
    assert np.array_equal(a.flat(), b.flat())
    bound = math.sqrt(6 / 40)
    assert np.abs(a.weights[0]).max() <= bound
    assert np.all(a.biases[0] == 0)


def test_backward_zero_upstream(rng):
    net = init_net([3, 6, 6, 2], rng)
    grads = backward(net, rng.normal(size=3), np.zeros(2))
    assert all(np.all(g == 0) for g in grads)


def test_backward_scalar_linear():
    net = DenseNet([1, 1], [np.array([[0.7]])], [np.array([0.0])])
    dw, db = backward(net, [2.0], [1.0])
    assert dw[0, 0] == 2.0
    assert db[0] == 1.0


def test_backward_shape_mismatch(rng):
    net = init_net([3, 4, 2], rng)
    with pytest.raises(ShapeError):
        backward(net, np.ones(3), np.ones(3))


@pytest.mark.parametrize("weighted", [False, True])
def test_gradients_match_finite_differences(rng, weighted):
    net = init_net([4, 9, 7, 6], rng)
    for b in net.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.normal(size=(3, 4))
    target = rng.normal(size=(3, 6))
    w = rng.uniform(size=(3, 6)) if weighted else None

    def loss_value():
        out = forward(net, x)
        return (weighted_l1_loss(out, target, w) if weighted else l1_loss(out, target))[0]

    out = forward(net, x)
    _, g = weighted_l1_loss(out, target, w) if weighted else l1_loss(out, target)
    analytic = backward(net, x, g)
    numeric = fd_gradients(loss_value, net.parameters())
    assert max_relative_error(analytic, numeric) <= 1e-4


def test_l1_examples():
    t = np.array([0.3, -1.0, 2.0])
    assert l1_loss(t, t)[0] == 0.0
    assert l1_loss(t + 0.25, t)[0] == pytest.approx(0.25, abs=1e-15)
    value, grad = l1_loss([0.0, 2.0], [1.0, 1.0])
    assert value == 1.0
    assert np.array_equal(grad, [-0.5, 0.5])


def test_l1_sign_zero():
    _, grad = l1_loss([1.0, 2.0], [1.0, 3.0])
    assert np.array_equal(grad, [0.0, -0.5])


def test_l1_length_mismatch():
    with pytest.raises(ShapeError):
        l1_loss([1.0, 2.0], [1.0])


def test_weighted_l1_examples():
    value, _ = weighted_l1_loss([0.0, 0.0], [2.0, 4.0], [1.0, 0.5])
    assert value == 2.0
    p, t = np.array([0.1, 0.9, -3.0]), np.array([1.0, 0.0, 2.0])
    zero_v, zero_g = weighted_l1_loss(p, t, np.zeros(3))
    assert zero_v == 0.0 and np.all(zero_g == 0)


def test_weighted_l1_rejects_bad_weights():
    with pytest.raises(ValueError):
        weighted_l1_loss([0.0], [1.0], [1.5])
    with pytest.raises(ValueError):
        weighted_l1_loss([0.0], [1.0], [-0.1])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=40))
def test_unit_weights_reduce_to_l1_exactly(pairs):
    p = np.array([a for a, _ in pairs])
    t = np.array([b for _, b in pairs])
    v1, g1 = l1_loss(p, t)
    v2, g2 = weighted_l1_loss(p, t, np.ones_like(p))
    assert v1 == v2
    assert np.array_equal(g1, g2)
    assert v1 >= 0.0
    assert l1_loss(p, p)[0] == 0.0


def _scalar_state(**hyper):
    return OptimState.for_params([np.zeros(1)], **hyper)


def test_adamw_zero_grad_no_decay():
    p = [np.array([1.0, -2.0])]
    state = OptimState.for_params(p, weight_decay=0.0)
    adamw_step(p, [np.zeros(2)], state, 1e-3)
    assert np.array_equal(p[0], [1.0, -2.0])
    assert state.step == 1


def test_adamw_single_step_closed_form():
    # m = 0.1, v = 0.001 -> bias corrected both 1 -> w - lr * 1 / (1 + eps)
    p = [np.array([1.0])]
    state = _scalar_state(weight_decay=0.0)
    adamw_step(p, [np.array([1.0])], state, 1e-3)
    assert p[0][0] == pytest.approx(1.0 - 1e-3 / (1.0 + 1e-8), abs=1e-15)
    assert p[0][0] == pytest.approx(0.999, abs=1e-10)


def test_adamw_decay_only():
    p = [np.array([1.0])]
    state = _scalar_state(weight_decay=0.01)
    adamw_step(p, [np.array([0.0])], state, 1e-3)
    assert p[0][0] == pytest.approx(1.0 * (1 - 0.001 * 0.01), abs=1e-16)


def test_adamw_rejects_nonfinite():
    p = [np.array([1.0, 2.0])]
    state = OptimState.for_params(p)
    with pytest.raises(NonFiniteGradientError):
        adamw_step(p, [np.array([np.nan, 1.0])], state, 1e-3)
    assert np.array_equal(p[0], [1.0, 2.0])
    assert state.step == 0
    assert np.all(state.exp_avg[0] == 0)


def test_adamw_deterministic(rng):
    g = [rng.normal(size=(3, 4)), rng.normal(size=4)]
    start = [rng.normal(size=(3, 4)), rng.normal(size=4)]
    results = []
    for _ in range(2):
        p = [a.copy() for a in start]
        s = OptimState.for_params(p)
        for _ in range(3):
            adamw_step(p, g, s, 2e-3)
        results.append(p)
    assert all(np.array_equal(a, b) for a, b in zip(*results))


def test_lr_examples():
    s = LrSchedule(lr_max=0.001, lr_min=0.0, T_0=10, T_mult=2)
    assert lr_at(s, 0) == 0.001
    assert lr_at(s, 5) == pytest.approx(0.0005, abs=1e-18)
    assert lr_at(s, 10) == 0.001
    # second cycle is 20 epochs long: midpoint at 20, restart at 30
    assert lr_at(s, 20) == pytest.approx(0.0005, abs=1e-18)
    assert lr_at(s, 30) == 0.001
    s2 = LrSchedule(lr_max=0.01, lr_min=0.002, T_0=4, T_mult=1)
    assert lr_at(s2, 2) == pytest.approx(0.006)
    assert lr_at(s2, 8) == 0.01


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0, 500, allow_nan=False),
    st.floats(1e-6, 1.0),
    st.floats(0, 1.0),
    st.integers(1, 20),
    st.integers(1, 3),
)
def test_lr_in_range(epoch, lr_max, frac, t0, tmult):
    s = LrSchedule(lr_max=lr_max, lr_min=lr_max * frac, T_0=t0, T_mult=tmult)
    assert s.lr_min <= lr_at(s, epoch) <= s.lr_max


def test_lr_rejects_negative_epoch():
    with pytest.raises(ValueError):
        lr_at(LrSchedule(), -1)


def test_checkpoint_round_trip(tmp_path, rng):
    net = init_net([5, 11, 3], rng)
    path = tmp_path / "m.fsnn"
    save_checkpoint(net, path)
    raw = path.read_bytes()
    assert raw[:4] == b"FSNN"
    back = load_checkpoint(path)
    assert back.layer_sizes == net.layer_sizes
    assert all(np.array_equal(a, b) for a, b in zip(back.parameters(), net.parameters()))
    assert checkpoint_bytes(back) == raw


def test_checkpoint_layout(rng):
    net = init_net([2, 3], rng)
    raw = checkpoint_bytes(net)
    assert len(raw) == 4 + 4 + 4 + 2 * 4 + 8 * (6 + 3)
    assert np.frombuffer(raw, "<f8", count=6, offset=20).tolist() == net.weights[0].ravel().tolist()


def test_checkpoint_rejects_garbage(rng):
    with pytest.raises(ValueError):
        checkpoint_from_bytes(b"NOPE" + bytes(20))
    raw = checkpoint_bytes(init_net([2, 3], rng))
    with pytest.raises(ValueError):
        checkpoint_from_bytes(raw + b"\x00")
