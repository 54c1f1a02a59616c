import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fgrad.gradcheck import adjoint_error, fd_error, layer_cases
from fgrad.layers import (
    AdaptiveAvgPool2d,
    BatchNorm,
    Conv2d,
    DualTensor,
    Linear,
    NonFiniteError,
    ReLU,
    ShapeError,
    adaptive_bounds,
    layer_apply,
    layer_jvp,
    layer_vjp,
)


def linear_22():
    layer = Linear(2, 2, dtype=np.float64)
    layer.params["weight"] = np.array([[1.0, 0.0], [0.0, 2.0]])
    layer.params["bias"] = np.array([0.0, 1.0])
    return layer


def test_relu_forward():
    out = layer_apply(ReLU(), np.array([[-1.0, 2.0], [0.0, -3.0]]))
    np.testing.assert_array_equal(out, [[0, 2], [0, 0]])


def test_identity_conv():
    conv = Conv2d(3, 3, 1, bias=False, dtype=np.float64)
    conv.params["weight"] = np.eye(3).reshape(3, 3, 1, 1)
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
    np.testing.assert_array_equal(layer_apply(conv, x), x)


def test_linear_forward_hand_value():
    np.testing.assert_allclose(layer_apply(linear_22(), np.array([[3.0, 4.0]])), [[3.0, 9.0]])


def test_relu_jvp_negative_coordinate():
    out = layer_jvp(ReLU(), DualTensor(np.array([[-1.0, 2.0]]), np.array([[5.0, 5.0]])))
    np.testing.assert_array_equal(out.tangent, [[0, 5]])


def test_linear_jvp_is_weight_matrix():
    out = layer_jvp(linear_22(), DualTensor(np.array([[3.0, 4.0]]), np.array([[1.0, 0.0]])))
    np.testing.assert_allclose(out.tangent, [[1.0, 0.0]])


@pytest.mark.parametrize("case", range(len(layer_cases())))
def test_zero_tangents_give_zero_output_tangent(case):
    _, layer, x, mode = layer_cases()[case]
    zeros = {k: np.zeros_like(v) for k, v in layer.params.items()}
    _, y_dot = layer.jvp(x, np.zeros_like(x), zeros, mode)
    assert not np.any(y_dot)


def test_relu_vjp():
    dx, _ = layer_vjp(ReLU(), np.array([[-1.0, 2.0]]), np.array([[7.0, 7.0]]))
    np.testing.assert_array_equal(dx, [[0, 7]])


def test_relu_derivative_at_zero_is_zero():
    x = np.array([[0.0, 1.0]])
    dx, _ = layer_vjp(ReLU(), x, np.ones_like(x))
    _, t = ReLU().jvp(x, np.ones_like(x))
    np.testing.assert_array_equal(dx, [[0, 1]])
    np.testing.assert_array_equal(t, [[0, 1]])


def test_linear_vjp_outer_product():
    dx, g = layer_vjp(linear_22(), np.array([[3.0, 4.0]]), np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(dx, [[1.0, 2.0]])
    np.testing.assert_allclose(g["weight"], [[3.0, 4.0], [3.0, 4.0]])
    np.testing.assert_allclose(g["bias"], [1.0, 1.0])


@pytest.mark.parametrize("case", range(len(layer_cases())))
def test_adjoint_and_finite_differences_64bit(case):
    name, layer, x, mode = layer_cases()[case]
    rng = np.random.default_rng(case)
    assert adjoint_error(layer, x, mode, rng) <= 1e-10, name
    assert fd_error(layer, x, mode, rng) <= 1e-5, name


@pytest.mark.parametrize("case", range(len(layer_cases())))
def test_adjoint_32bit(case):
    name, layer, x, mode = layer_cases(np.float32)[case]
    rng = np.random.default_rng(case)
    u = rng.standard_normal(x.shape).astype(np.float32)
    up = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in layer.params.items()}
    y, y_dot = layer.jvp(x, u, up, mode)
    v = rng.standard_normal(y.shape).astype(np.float32)
    dx, dp = layer.vjp(x, v, mode)
    lhs = float(np.vdot(v, y_dot))
    rhs = float(np.vdot(dx, u)) + sum(float(np.vdot(dp[k], up[k])) for k in up)
    assert abs(lhs - rhs) <= 1e-4 * (1 + abs(lhs)), name


@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 7), st.integers(3, 7), st.sampled_from([1, 3]),
       st.sampled_from([1, 2]), st.integers(0, 1), st.integers(0, 2**16))
def test_conv_adjoint_random_geometry(b, c, h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    layer = Conv2d(c, 2, k, stride, pad, bias=True, rng=rng, dtype=np.float64)
    x = rng.standard_normal((b, c, h, w))
    assert adjoint_error(layer, x, "train", rng) <= 1e-10


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**16))
def test_jvp_linearity(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    layer = BatchNorm(3, dtype=np.float64)
    x = rng.standard_normal((4, 3, 2, 2))
    u, w = rng.standard_normal(x.shape), rng.standard_normal(x.shape)
    pu = {k: rng.standard_normal(v.shape) for k, v in layer.params.items()}
    pw = {k: rng.standard_normal(v.shape) for k, v in layer.params.items()}
    mix = {k: alpha * pu[k] + beta * pw[k] for k in pu}
    _, a = layer.jvp(x, alpha * u + beta * w, mix)
    _, tu = layer.jvp(x, u, pu)
    _, tw = layer.jvp(x, w, pw)
    np.testing.assert_allclose(a, alpha * tu + beta * tw, rtol=1e-9, atol=1e-9)


def test_batchnorm_eval_is_fixed_affine_map():
    rng = np.random.default_rng(0)
    bn = BatchNorm(3, dtype=np.float64)
    bn.buffers["running_mean"] = rng.standard_normal(3)
    bn.buffers["running_var"] = rng.random(3) + 0.5
    bn.params["weight"] = rng.standard_normal(3)
    bn.params["bias"] = rng.standard_normal(3)
    x = rng.standard_normal((5, 3, 2, 2))
    scale = bn.params["weight"] / np.sqrt(bn.buffers["running_var"] + bn.eps)
    shift = bn.params["bias"] - bn.buffers["running_mean"] * scale
    expect = x * scale[None, :, None, None] + shift[None, :, None, None]
    y1 = bn.forward(x, "eval")
    y2 = bn.forward(x, "eval")
    np.testing.assert_allclose(y1, expect, rtol=1e-12)
    np.testing.assert_array_equal(y1, y2)


def test_batchnorm_train_updates_running_stats_nonnegative():
    rng = np.random.default_rng(1)
    bn = BatchNorm(4, dtype=np.float64)
    for _ in range(5):
        bn.forward(rng.standard_normal((3, 4, 2, 2)) * 3, "train", update_stats=True)
    assert np.all(bn.buffers["running_var"] >= 0)
    assert not np.allclose(bn.buffers["running_mean"], 0)


def test_shape_mismatch_and_nonfinite_errors():
    with pytest.raises(ShapeError):
        layer_apply(Linear(3, 2), np.zeros((2, 4), np.float32))
    with pytest.raises(ShapeError):
        DualTensor(np.zeros(2), np.zeros(3))
    with pytest.raises(ShapeError):
        layer_vjp(linear_22(), np.array([[1.0, 2.0]]), np.zeros((1, 3)))
    with pytest.raises(NonFiniteError):
        layer_apply(ReLU(), np.array([[np.inf, 1.0]]))
    with pytest.raises(ValueError):
        layer_apply(ReLU(), np.zeros((1, 2)), mode="test")


def test_conv_weight_shape_and_kaiming_bound():
    conv = Conv2d(3, 5, 3, rng=np.random.default_rng(0))
    assert conv.params["weight"].shape == (5, 3, 3, 3)
    assert np.abs(conv.params["weight"]).max() <= np.sqrt(6 / 27)
    assert not np.any(conv.params["bias"])


def test_adaptive_pool_floor_bounds_and_rejects_upsampling():
    assert adaptive_bounds(5, 2) == [(0, 2), (2, 5)]
    pool = AdaptiveAvgPool2d(2, 2)
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    out = pool.forward(x)
    np.testing.assert_allclose(out[0, 0, 0, 0], x[0, 0, :2, :2].mean())
    np.testing.assert_allclose(out[0, 0, 1, 1], x[0, 0, 2:, 2:].mean())
    with pytest.raises(ShapeError):
        pool.forward(np.zeros((1, 1, 1, 1)))
