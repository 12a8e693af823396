"""Autodiff engine: op semantics, finite-difference checks, tape mechanics."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from petrecon import numeric as nm
from petrecon.numeric import gradcheck


def t(arr, grad=False, dtype=np.float32):
    return nm.Tensor(np.asarray(arr, dtype=dtype), requires_grad=grad)


# ------------------------------------------------------------ tensor basics

def test_tensor_defaults_float32():
    x = nm.Tensor(np.arange(4.0))
    assert x.data.dtype == np.float32
    assert not x.requires_grad


def test_tensor_shadow_float64_optin():
    x = nm.Tensor(np.arange(4.0), dtype=np.float64)
    assert x.data.dtype == np.float64


def test_tensor_rejects_nonfinite():
    with pytest.raises(nm.NumericError):
        nm.Tensor(np.array([1.0, np.nan]))


def test_tensor_rejects_rank5():
    with pytest.raises(nm.NumericError):
        nm.Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_mixed_dtype_op_rejected():
    a = nm.Tensor(np.ones(3))
    b = nm.Tensor(np.ones(3), dtype=np.float64)
    with pytest.raises(nm.NumericError):
        nm.add(a, b)


def test_no_grad_suppresses_tape():
    x = t([1.0, 2.0], grad=True)
    with nm.no_grad():
        y = nm.scale(x, 2.0)
    assert y.node is None


# ------------------------------------------------------------ op oracles

def test_space_to_channel_ramp():
    # 1x4x4 ramp, r=2: channel 0 collects the top-left subpixel of each cell
    x = t(np.arange(16.0).reshape(1, 4, 4))
    y = nm.space_to_channel(x, 2)
    assert y.data.shape == (4, 2, 2)
    np.testing.assert_array_equal(y.data[0], [[0.0, 2.0], [8.0, 10.0]])


def test_space_to_channel_roundtrip():
    x = t(np.random.default_rng(0).random((3, 8, 6)))
    y = nm.channel_to_space(nm.space_to_channel(x, 2), 2)
    np.testing.assert_array_equal(y.data, x.data)


def test_gelu_fixed_points():
    x = t([0.0, 100.0])
    y = nm.gelu(x)
    assert y.data[0] == 0.0
    np.testing.assert_allclose(y.data[1], 100.0, rtol=1e-6)


def test_softmax_constant_rows():
    x = t(np.zeros((2, 3)))
    y = nm.softmax(x, axis=1)
    np.testing.assert_allclose(y.data, 1.0 / 3.0, atol=1e-7)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    a = rng.random((4, 5)).astype(np.float32)
    s1 = nm.softmax(t(a), axis=1).data
    s2 = nm.softmax(t(a + 100.0), axis=1).data
    np.testing.assert_allclose(s1, s2, atol=1e-6)


def test_sum_sq_gradient():
    x = t([1.0, 2.0], grad=True)
    nm.backward(nm.sum_sq(x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_matmul_transpose_flags():
    rng = np.random.default_rng(2)
    a = rng.random((3, 4)).astype(np.float32)
    b = rng.random((3, 5)).astype(np.float32)
    y = nm.matmul(t(a), t(b), transpose_a=True)
    np.testing.assert_allclose(y.data, a.T @ b, rtol=1e-6)


def test_matmul_batched():
    rng = np.random.default_rng(3)
    a = rng.random((2, 3, 4)).astype(np.float32)
    b = rng.random((2, 4, 5)).astype(np.float32)
    y = nm.matmul(t(a), t(b))
    np.testing.assert_allclose(y.data, a @ b, rtol=1e-6)


def test_clamp_min_forward_and_grad():
    x = t([-1.0, 0.5, 3.0], grad=True)
    y = nm.clamp_min(x, 1.0)
    np.testing.assert_array_equal(y.data, [1.0, 1.0, 3.0])
    nm.backward(nm.sum_sq(y))
    # clamped entries pass no gradient
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 6.0])


def test_layernorm_normalizes_channels():
    rng = np.random.default_rng(4)
    x = t(rng.random((6, 5, 5)) * 3 + 2)
    gamma = t(np.ones(6))
    beta = t(np.zeros(6))
    y = nm.layernorm(x, gamma, beta).data
    assert abs(y[:, 2, 3].mean()) < 1e-6
    assert abs(y[:, 2, 3].std() - 1.0) < 1e-3


def test_concat_and_mean_axis():
    a, b = t([1.0, 2.0]), t([3.0])
    c = nm.concat([a, b], axis=0)
    np.testing.assert_array_equal(c.data, [1, 2, 3])
    m = nm.mean(t(np.arange(12.0).reshape(3, 4)), axis=1)
    np.testing.assert_allclose(m.data, [1.5, 5.5, 9.5])


def test_div_matches_numpy():
    rng = np.random.default_rng(5)
    a = rng.random((3, 3)).astype(np.float32) + 0.5
    b = rng.random((3, 3)).astype(np.float32) + 0.5
    np.testing.assert_allclose(nm.div(t(a), t(b)).data, a / b, rtol=1e-6)


# ------------------------------------------------------------ backward walk

def test_backward_accumulates_on_reuse():
    x = t([2.0], grad=True)
    y = nm.add(nm.mul(x, x), x)  # x^2 + x, d/dx = 2x + 1
    nm.backward(y)
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_leaves_filter():
    x = t([1.0], grad=True)
    z = t([1.0], grad=True)
    y = nm.scale(x, 3.0)
    with pytest.raises(nm.NumericError):
        nm.backward(y, leaves=[z])


def test_backward_seed_shape_mismatch():
    x = t([1.0, 2.0], grad=True)
    y = nm.scale(x, 1.0)
    with pytest.raises(nm.NumericError):
        nm.backward(y, seed=np.ones(3, dtype=np.float32))


def test_second_backward_accumulates():
    x = t([1.0], grad=True)
    y = nm.scale(x, 2.0)
    nm.backward(y)
    y2 = nm.scale(x, 2.0)
    nm.backward(y2)
    np.testing.assert_allclose(x.grad, [4.0])


# ------------------------------------------------------------ FD suite

def test_gradient_suite_under_tolerance():
    results = gradcheck.run_suite()
    worst = max(err for _, _, _, err in results)
    assert worst < 1e-4, f"worst rel err {worst}"


def test_suite_covers_every_registered_op():
    assert gradcheck.suite_ops() == set(nm.registered_ops())


@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_single_op_fd_random_seed(seed):
    err = gradcheck.grad_check("mul", [(3, 4), (3, 4)], seed=seed)
    assert err < 1e-4
