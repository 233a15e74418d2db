import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oneshot import tensor as T
from oneshot.tensor import GradientRecorder, Parameter, ShapeError, Tensor

from gradcheck import REL_TOL, away_from, check_gradients, conv2d_loops, distinct_windows, matvec_loops


def t(x):
    return Tensor(np.asarray(x, dtype=np.float32))


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    out = T.conv2d(t([[[1, 2], [3, 4]]]), t(np.ones((1, 1, 1, 1))), t([0]))
    np.testing.assert_array_equal(out.data, [[[1, 2], [3, 4]]])


def test_conv_summing_kernel():
    out = T.conv2d(t([[[1, 2], [3, 4]]]), t(np.ones((1, 1, 2, 2))), t([0]))
    np.testing.assert_array_equal(out.data, [[[10]]])


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = T.conv2d(t(x), t(w), t(b))
    np.testing.assert_allclose(out.data, conv2d_loops(x.astype(np.float32), w.astype(np.float32), b.astype(np.float32)), atol=1e-5)


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(1)
    x, w, b = t(rng.normal(size=(4, 2, 7, 6))), t(rng.normal(size=(3, 2, 3, 2))), t(rng.normal(size=3))
    batched = T.conv2d(x, w, b).data
    for i in range(4):
        np.testing.assert_allclose(batched[i], T.conv2d(t(x.data[i]), w, b).data, atol=1e-5)


@pytest.mark.parametrize(
    "xs,ws,bs",
    [((2, 4, 4), (1, 3, 2, 2), (1,)), ((1, 2, 2), (1, 1, 3, 3), (1,)), ((1, 4, 4), (2, 1, 2, 2), (3,))],
)
def test_conv_shape_errors_name_both_shapes(xs, ws, bs):
    with pytest.raises(ShapeError) as err:
        T.conv2d(t(np.zeros(xs)), t(np.zeros(ws)), t(np.zeros(bs)))
    assert str(xs) in str(err.value) and str(ws) in str(err.value)


# ---------------------------------------------------------------- maxpool


def test_maxpool_basic():
    np.testing.assert_array_equal(T.maxpool2(t([[[1, 2], [3, 4]]])).data, [[[4]]])


def test_maxpool_constant():
    out = T.maxpool2(t(np.full((2, 6, 4), 3.5)))
    assert out.shape == (2, 3, 2)
    assert np.all(out.data == 3.5)


def test_maxpool_matches_window_oracle():
    from gradcheck import maxpool_loops

    x = np.random.default_rng(2).normal(size=(4, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(T.maxpool2(t(x)).data, maxpool_loops(x))


def test_maxpool_rejects_odd():
    with pytest.raises(ShapeError):
        T.maxpool2(t(np.zeros((1, 3, 4))))


def test_maxpool_tie_goes_to_first_cell():
    x = Parameter(np.ones((1, 2, 2)), "x")
    with GradientRecorder() as rec:
        loss = T.mean(T.maxpool2(x))
    T.backward(loss, rec)
    np.testing.assert_array_equal(x.grad, [[[1, 0], [0, 0]]])


# ---------------------------------------------------------------- linear / activations / distances


def test_linear_identity_and_bias():
    x = t([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(T.linear(x, t(np.eye(3)), t(np.zeros(3))).data, x.data)
    np.testing.assert_array_equal(T.linear(x, t(np.zeros((2, 3))), t([5, 6])).data, [5, 6])


def test_linear_matches_matvec_oracle():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=16), rng.normal(size=(8, 16)), rng.normal(size=8)
    np.testing.assert_allclose(T.linear(t(x), t(w), t(b)).data, matvec_loops(x, w, b), atol=1e-5)


def test_linear_dimension_mismatch():
    with pytest.raises(ShapeError):
        T.linear(t(np.zeros(4)), t(np.zeros((2, 3))), t(np.zeros(2)))


def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(T.relu(t([-1, 0, 2])).data, [0, 0, 2])
    assert T.sigmoid(t([0])).data[0] == 0.5


def test_sigmoid_gradient_at_zero():
    x = Parameter(np.zeros(()), "x", dtype=np.float64)
    with GradientRecorder() as rec:
        y = T.sigmoid(x)
    T.backward(y, rec)
    h = 1e-3
    fd = (1 / (1 + math.exp(-h)) - 1 / (1 + math.exp(h))) / (2 * h)
    assert x.grad == pytest.approx(0.25)
    assert x.grad == pytest.approx(fd, rel=1e-4)


def test_sigmoid_extreme_inputs_stay_finite():
    out = T.sigmoid(t([-1000, 1000])).data
    assert np.all(np.isfinite(out))


def test_l2_distance_sq_values():
    assert T.l2_distance_sq(t([1, 2]), t([1, 2])).item() == 0
    assert T.l2_distance_sq(t([1, 0]), t([0, 1])).item() == 2
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=128), rng.normal(size=128)
    oracle = sum((float(x) - float(y)) ** 2 for x, y in zip(a.astype(np.float32), b.astype(np.float32)))
    assert T.l2_distance_sq(t(a), t(b)).item() == pytest.approx(oracle, rel=1e-4)
    with pytest.raises(ShapeError):
        T.l2_distance_sq(t([1, 2]), t([1, 2, 3]))


def test_bce_values():
    assert T.bce_loss(t(0.5), 1).item() == pytest.approx(math.log(2), abs=1e-6)
    assert T.bce_loss(t(0.5), 0).item() == pytest.approx(math.log(2), abs=1e-6)
    rng = np.random.default_rng(5)
    for _ in range(50):
        p, y = rng.uniform(0.01, 0.99), int(rng.integers(2))
        p32 = float(np.float32(p))
        expected = -(y * math.log(p32) + (1 - y) * math.log(1 - p32))
        assert T.bce_loss(t(p), y).item() == pytest.approx(expected, abs=1e-6)


def test_bce_clamps_and_rejects_bad_targets():
    assert np.isfinite(T.bce_loss(t(0.0), 1).item())
    assert T.bce_loss(t(0.0), 1).item() == pytest.approx(-math.log(1e-7), rel=1e-3)
    with pytest.raises(ValueError):
        T.bce_loss(t(0.5), 2)


# ---------------------------------------------------------------- backward / optimizer


def test_backward_of_parameter_itself():
    p = Parameter(np.array(3.0), "p")
    T.backward(p, GradientRecorder())
    assert p.grad == 1


def test_backward_shared_branch_cancels():
    rng = np.random.default_rng(6)
    w, b = Parameter(rng.normal(size=(4, 3)), "w"), Parameter(rng.normal(size=4), "b")
    x = t(rng.normal(size=3))
    with GradientRecorder() as rec:
        loss = T.l2_distance_sq(T.linear(x, w, b), T.linear(x, w, b))
    T.backward(loss, rec)
    assert np.all(w.grad == 0) and np.all(b.grad == 0)


def test_backward_rejects_non_scalar():
    x = Parameter(np.ones(3), "x")
    with GradientRecorder() as rec:
        y = T.relu(x)
    with pytest.raises(ShapeError):
        T.backward(y, rec)


def test_backward_visits_tape_in_reverse():
    order = []
    x = Parameter(np.ones(2), "x")
    with GradientRecorder() as rec:
        a = T.relu(x)
        b = T.sigmoid(a)
        loss = T.mean(b)
    names = ["relu", "sigmoid", "mean"]
    for i, (out, inputs, fn) in enumerate(list(rec.ops)):
        rec.ops[i] = (out, inputs, (lambda f, n: lambda g: (order.append(n), f(g))[1])(fn, names[i]))
    T.backward(loss, rec)
    assert order == ["mean", "sigmoid", "relu"]


def test_gradient_accumulation_matches_doubled_expression():
    rng = np.random.default_rng(7)
    x = t(rng.normal(size=5))
    w1 = Parameter(rng.normal(size=(3, 5)), "w", dtype=np.float64)
    b1 = Parameter(np.zeros(3), "b", dtype=np.float64)
    for _ in range(2):
        with GradientRecorder() as rec:
            loss = T.mean(T.sigmoid(T.linear(x, w1, b1)))
        T.backward(loss, rec)
    twice = w1.grad.copy()
    T.zero_grads([w1, b1])
    with GradientRecorder() as rec:
        branch = T.mean(T.sigmoid(T.linear(x, w1, b1)))
        loss = branch + branch
    T.backward(loss, rec)
    np.testing.assert_allclose(w1.grad, twice, rtol=1e-12)


def test_no_recording_without_recorder():
    x = Parameter(np.ones(2), "x")
    y = T.relu(x)
    assert not y.requires_grad


def test_sgd_step_rules():
    p = Parameter(np.array([1.0]), "p")
    p.grad[:] = 2.0
    T.sgd_step([p], lr=0.1, momentum=0.0)
    assert p.data[0] == pytest.approx(0.8)
    assert p.grad[0] == 0
    T.sgd_step([p], lr=0.1, momentum=0.9)  # grad 0, velocity decays from 2
    q = Parameter(np.array([1.0]), "q")
    T.sgd_step([q], lr=0.1, momentum=0.9)
    assert q.data[0] == 1.0
    with pytest.raises(ValueError):
        T.sgd_step([q], lr=0.0, momentum=0.9)


def test_sgd_two_step_momentum_recurrence():
    g = 0.5
    p = Parameter(np.array([0.0]), "p", dtype=np.float64)
    for _ in range(2):
        p.grad[:] = g
        T.sgd_step([p], lr=1.0, momentum=0.9)
    assert p.data[0] == pytest.approx(-(g + 1.9 * g), abs=1e-12)


def test_forward_thread_safe_with_frozen_params():
    rng = np.random.default_rng(8)
    w, b = t(rng.normal(size=(4, 1, 3, 3))), t(rng.normal(size=4))
    xs = [t(rng.normal(size=(1, 9, 9))) for _ in range(8)]
    expected = [T.conv2d(x, w, b).data for x in xs]
    results = [None] * len(xs)

    def run(i):
        with GradientRecorder():
            results[i] = T.conv2d(xs[i], w, b).data

    threads = [threading.Thread(target=run, args=(i,)) for i in range(len(xs))]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    for r, e in zip(results, expected):
        np.testing.assert_array_equal(r, e)


def test_determinism_bit_identical():
    rng = np.random.default_rng(9)
    x, w, b = rng.normal(size=(3, 2, 9, 9)), rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4)
    a = T.conv2d(t(x), t(w), t(b)).data
    c = T.conv2d(t(x), t(w), t(b)).data
    assert a.tobytes() == c.tobytes()


# ---------------------------------------------------------------- finite differences


@pytest.mark.parametrize("case", range(10))
def test_gradients_conv_pool_linear(case):
    rng = np.random.default_rng(100 + case)
    c, o, k = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h = int(rng.integers(k, k + 4))
    x, w, b = rng.normal(size=(c, h, h)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
    assert check_gradients(lambda x, w, b: T.conv2d(x, w, b), dict(x=x, w=w, b=b), rng) < REL_TOL
    assert check_gradients(lambda x: T.maxpool2(x), dict(x=distinct_windows(rng, (2, 4, 6))), rng) < REL_TOL
    lx, lw, lb = rng.normal(size=6), rng.normal(size=(4, 6)), rng.normal(size=4)
    assert check_gradients(lambda x, w, b: T.linear(x, w, b), dict(x=lx, w=lw, b=lb), rng) < REL_TOL


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gradients_elementwise_property(seed):
    rng = np.random.default_rng(seed)
    x = away_from(rng, (7,))
    assert check_gradients(lambda x: T.relu(x), dict(x=x), rng) < REL_TOL
    assert check_gradients(lambda x: T.sigmoid(x), dict(x=x), rng) < REL_TOL
    a, b = rng.normal(size=5), rng.normal(size=5)
    assert check_gradients(lambda a, b: T.l2_distance_sq(a, b), dict(a=a, b=b), rng) < REL_TOL
    assert check_gradients(lambda a, b: T.l2_distance(a, b), dict(a=a, b=b), rng) < REL_TOL
    assert check_gradients(lambda a: T.l2_normalize(a), dict(a=a), rng) < REL_TOL
