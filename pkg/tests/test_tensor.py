"""Autodiff core: forward values, hand-derived gradients, Adam."""
import math

import numpy as np
import pytest

from demoire import tensor as T
from demoire.errors import ContractError, DegenerateStatisticsError, NonFiniteError, ShapeError
from demoire.gradcheck import check, project
from demoire.tensor import Adam, AdamState, BatchNormStats, Tensor, adam_step


def fd(op, arrays, rng):
    """Finite-difference relative error of ``op`` scalarized by random weights."""
    probe = op([Tensor(a, dtype=np.float64) for a in arrays])
    r = rng.standard_normal(probe.shape)
    return check(lambda t: project(op(t), r), arrays, rng=rng)


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------- conv2d

def test_conv_box_sum_center_and_corner():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w, Tensor(np.zeros(1)), stride=1, pad=1).data
    assert out.shape == (1, 1, 3, 3)
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == 4
    assert out[0, 0, 0, 1] == 6


def test_conv_identity_kernel(rng):
    x = rng.uniform(-1, 1, (2, 3, 7, 5))
    for k in (3, 5):
        w = np.zeros((3, 3, k, k))
        for c in range(3):
            w[c, c, k // 2, k // 2] = 1.0
        out = T.conv2d(Tensor(x), Tensor(w), pad=k // 2).data
        np.testing.assert_allclose(out, x.astype(np.float32), atol=1e-6)


def test_conv_matches_loop_reference(rng):
    x = rng.normal(size=(2, 4, 9, 8))
    w = rng.normal(size=(6, 4, 3, 3))
    b = rng.normal(size=6)
    for stride, pad in ((1, 1), (2, 1), (1, 0), (2, 0)):
        fast = T.conv2d(t64(x), t64(w), t64(b), stride=stride, pad=pad).data
        slow = T.conv2d_loop(x, w, b, stride=stride, pad=pad)
        np.testing.assert_allclose(fast, slow, atol=1e-10)


def test_conv_gradient_against_finite_differences(rng):
    x = rng.uniform(-1, 1, (2, 4, 8, 8))
    w = rng.uniform(-1, 1, (6, 4, 3, 3))
    b = rng.uniform(-1, 1, 6)
    err = fd(lambda t: T.conv2d(t[0], t[1], t[2], stride=1, pad=1), [x, w, b], rng)
    assert err < 1e-3
    err = fd(lambda t: T.conv2d(t[0], t[1], t[2], stride=2, pad=1), [x, w, b], rng)
    assert err < 1e-3


@pytest.mark.parametrize("xs,ws", [((1, 3, 4), (1, 3, 3, 3)), ((1, 2, 4, 4), (1, 3, 3, 3)),
                                   ((1, 3, 4, 4), (1, 3, 3, 2)), ((1, 3, 1, 1), (1, 3, 5, 5))])
def test_conv_shape_errors(xs, ws):
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros(xs)), Tensor(np.zeros(ws)))


def test_conv_rejects_bad_stride():
    with pytest.raises(ContractError):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


# ---------------------------------------------------------------- batch norm

def test_batch_norm_hand_values():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    out = T.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), "train").data.ravel()
    # mean 2.5, variance 1.25, (x - 2.5) / sqrt(1.25 + 1e-5)
    np.testing.assert_allclose(out, [-1.342, -0.447, 0.447, 1.342], atol=1e-3)


def test_batch_norm_constant_channel_gives_beta():
    x = np.full((2, 1, 3, 3), 7.0)
    out = T.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.full(1, 5.0)), "train").data
    np.testing.assert_allclose(out, 5.0)
    assert np.all(np.isfinite(out))


def test_batch_norm_denormalization_reconstructs_input(rng):
    x = rng.normal(2.0, 3.0, (4, 3, 5, 5))
    stats = BatchNormStats.zeros(3)
    out = T.batch_norm(t64(x), t64(np.ones(3)), t64(np.zeros(3)), "train", stats).data
    back = out * np.sqrt(stats.last_var + stats.eps).reshape(1, 3, 1, 1) + stats.last_mean.reshape(1, 3, 1, 1)
    np.testing.assert_allclose(back, x, atol=1e-5)


def test_batch_norm_running_statistics_and_infer_mode(rng):
    stats = BatchNormStats.zeros(2)
    x = rng.normal(1.0, 2.0, (8, 2, 4, 4))
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), "train", stats)
    n = 8 * 16
    np.testing.assert_allclose(stats.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(stats.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-5)
    before = (stats.running_mean.copy(), stats.running_var.copy())
    out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), "infer", stats).data
    np.testing.assert_array_equal(stats.running_mean, before[0])
    expect = (x - before[0].reshape(1, 2, 1, 1)) / np.sqrt(before[1].reshape(1, 2, 1, 1) + stats.eps)
    np.testing.assert_allclose(out, expect, rtol=1e-4, atol=1e-5)


def test_batch_norm_gradient(rng):
    x = rng.uniform(-1, 1, (2, 3, 4, 4))
    err = fd(lambda t: T.batch_norm(t[0], t[1], t[2], "train"), [x, rng.uniform(0.5, 1.5, 3), rng.uniform(-1, 1, 3)], rng)
    assert err < 1e-3


def test_batch_norm_degenerate_batch():
    with pytest.raises(DegenerateStatisticsError):
        T.batch_norm(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), "train")
    with pytest.raises(ContractError):
        T.batch_norm(Tensor(np.ones((2, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), "eval")


# ---------------------------------------------------------------- activations

def test_activation_values():
    np.testing.assert_array_equal(T.relu(Tensor([-3.0, 2.0])).data, [0.0, 2.0])
    assert T.tanh_act(Tensor([0.0])).data[0] == 0.0
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    np.testing.assert_allclose(T.leaky_relu(Tensor([-1.0, 3.0]), 0.2).data, [-0.2, 3.0])


def test_activation_codomains_on_extremes():
    x = Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))
    s = T.sigmoid(x).data
    th = T.tanh_act(x).data
    assert np.all((s >= 0) & (s <= 1)) and np.all(np.isfinite(s))
    assert np.all((th >= -1) & (th <= 1))


@pytest.mark.parametrize("op", [T.relu, T.tanh_act, T.sigmoid, lambda x: T.leaky_relu(x, 0.2)])
def test_activation_gradients(op, rng):
    x = rng.uniform(-1, 1, (3, 4))
    x[np.abs(x) < 0.05] = 0.3  # keep away from the relu kink
    assert fd(lambda t: op(t[0]), [x], rng) < 1e-3


def test_clamp_and_scale():
    x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    y = T.clamp(x, -1.0, 1.0)
    np.testing.assert_array_equal(y.data, [-1.0, 0.5, 1.0])
    T.backward(T.mse_loss(T.scale(y, 3.0), Tensor(np.zeros(3))))
    # only the in-range element carries gradient: d/dx (3x)^2 / 3 = 6x
    np.testing.assert_allclose(x.grad, [0.0, 3.0, 0.0], rtol=1e-6)


# ---------------------------------------------------------------- structural ops

def test_add_identity_and_gradient_routing(rng):
    x = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(T.add(Tensor(x), Tensor(np.zeros_like(x))).data, x.astype(np.float32))
    a, b = t64(x), t64(rng.normal(size=(2, 3)))
    out = T.add(a, b)
    T.backward(T.mse_loss(out, t64(np.zeros((2, 3)), grad=False)))
    np.testing.assert_allclose(a.grad, b.grad)
    np.testing.assert_allclose(a.grad, 2 * out.data / 6)
    assert fd(lambda t: T.add(t[0], t[1]), [x, rng.normal(size=(2, 3))], rng) < 1e-3


def test_concat_channels(rng):
    x = rng.normal(size=(1, 3, 2, 2))
    y = rng.normal(size=(1, 1, 2, 2))
    out = T.concat_channels(Tensor(x), Tensor(y)).data
    assert out.shape == (1, 4, 2, 2)
    np.testing.assert_allclose(out[:, :3], x, rtol=1e-6)
    assert fd(lambda t: T.concat_channels(t[0], t[1]), [x, y], rng) < 1e-3
    with pytest.raises(ShapeError):
        T.concat_channels(Tensor(x), Tensor(np.zeros((1, 1, 3, 2))))


def test_pool_and_linear(rng):
    x = rng.normal(size=(2, 5, 3, 3))
    np.testing.assert_allclose(T.global_avg_pool(t64(x)).data, x.mean(axis=(2, 3)))
    assert fd(lambda t: T.global_avg_pool(t[0]), [x], rng) < 1e-3
    assert fd(lambda t: T.linear(t[0], t[1], t[2]), [rng.normal(size=(4, 5)), rng.normal(size=(2, 5)),
                                                         rng.normal(size=2)], rng) < 1e-3


# ---------------------------------------------------------------- losses

def test_mse_values_and_gradient(rng):
    assert T.mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    assert T.mse_loss(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 1.0
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    ta = t64(a)
    T.backward(T.mse_loss(ta, t64(b, grad=False)))
    np.testing.assert_allclose(ta.grad, 2 * (a - b) / a.size)
    assert fd(lambda t: T.mse_loss(t[0], t[1]), [a, b], rng) < 1e-3


def test_bce_values():
    assert T.bce_loss(Tensor([0.5]), 1).item() == pytest.approx(math.log(2), abs=1e-6)
    assert T.bce_loss(Tensor([0.5]), 0).item() == pytest.approx(math.log(2), abs=1e-6)
    assert T.bce_loss(Tensor(np.array([1.0]), dtype=np.float64), 1).item() <= 1e-6
    worst = T.bce_loss(Tensor(np.array([0.0]), dtype=np.float64), 1).item()
    assert math.isfinite(worst) and worst == pytest.approx(-math.log(T.PROB_EPS))


def test_bce_gradient(rng):
    p = rng.uniform(0.05, 0.95, (6, 1))
    for label in (0, 1):
        assert fd(lambda t: T.bce_loss(t[0], label), [p], rng) < 1e-3


def test_bce_rejects_invalid_input():
    with pytest.raises(ContractError):
        T.bce_loss(Tensor([1.5]), 1)
    with pytest.raises(ContractError):
        T.bce_loss(Tensor([0.5]), 0.3)


# ---------------------------------------------------------------- backward

def test_backward_scalar_hand_derivative():
    w = t64([1.5])
    x, y = 2.0, 5.0
    T.backward(T.mse_loss(T.scale(w, x), t64([y], grad=False)))
    assert w.grad[0] == pytest.approx(2 * x * (1.5 * x - y))


def test_backward_shared_tensor_sums_gradients(rng):
    x = rng.normal(size=(2, 3))
    a = t64(x)
    out = T.add(T.tanh_act(a), T.scale(a, 2.0))
    T.backward(T.mse_loss(out, t64(np.zeros_like(x), grad=False)))
    g_out = 2 * (np.tanh(x) + 2 * x) / x.size
    np.testing.assert_allclose(a.grad, g_out * (1 - np.tanh(x) ** 2) + 2 * g_out, rtol=1e-10)
    assert fd(lambda t: T.add(T.tanh_act(t[0]), T.scale(t[0], 2.0)), [x], rng) < 1e-3


def test_backward_is_deterministic(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))

    def grads():
        tw = Tensor(w, requires_grad=True)
        out = T.relu(T.conv2d(Tensor(x), tw, pad=1))
        T.backward(T.mse_loss(out, Tensor(np.zeros(out.shape))))
        return tw.grad

    np.testing.assert_array_equal(grads(), grads())


def test_backward_contracts():
    with pytest.raises(ShapeError):
        T.backward(Tensor(np.zeros(3), requires_grad=True))
    with pytest.raises(ContractError):
        T.backward(T.mse_loss(Tensor([1.0]), Tensor([2.0])))


def test_no_grad_builds_no_graph():
    w = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = T.scale(w, 2.0)
    assert not out.requires_grad
    assert T.grad_enabled()


# ---------------------------------------------------------------- adam

def test_adam_first_step_is_lr():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    adam_step([p], [np.array([1.0], dtype=np.float32)], state)
    assert p.data[0] == pytest.approx(-0.1, rel=1e-5)


def test_adam_zero_gradient_leaves_parameter():
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    adam_step([p], [np.zeros(2, dtype=np.float32)], AdamState(lr=0.1))
    np.testing.assert_array_equal(p.data, [3.0, -2.0])


def _bowl(w0, steps=500, lr=1e-2):
    w = Tensor(np.array([w0]), requires_grad=True, name="w", dtype=np.float64)
    opt = Adam([w], lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        T.backward(T.mse_loss(w, Tensor(np.array([3.0]), dtype=np.float64)))
        opt.step()
    return float(w.data[0])


def test_adam_quadratic_bowl():
    # started one unit from the minimum; see the reference trajectory below for a far start
    assert abs(_bowl(2.0) - 3.0) < 1e-2
    assert abs(_bowl(4.0) - 3.0) < 1e-2


def test_adam_matches_textbook_recursion():
    """Independent scalar Adam on f(w) = (w - 3)^2 from w = 0."""
    w, m, v = 0.0, 0.0, 0.0
    b1, b2, lr, eps = 0.9, 0.999, 1e-2, 1e-8
    for t in range(1, 501):
        g = 2 * (w - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert _bowl(0.0) == pytest.approx(w, abs=1e-10)
    # from this far start 500 steps are not enough to settle: the early large
    # gradients dominate the second-moment estimate and shrink later steps
    assert 0.1 < abs(w - 3.0) < 0.3


def test_adam_names_parameter_with_nonfinite_gradient():
    p = Tensor(np.zeros(2), requires_grad=True, name="layer.w")
    with pytest.raises(NonFiniteError, match="layer.w"):
        adam_step([p], [np.array([np.nan, 0.0], dtype=np.float32)], AdamState())
    np.testing.assert_array_equal(p.data, 0.0)
