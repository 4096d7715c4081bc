import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import numerical_grad, rel_err
from ssrfcn import tensor as T
from ssrfcn.errors import (
    ConfigurationError,
    DegenerateBatchError,
    TrainingDivergenceError,
    UsageError,
)


def loop_conv(x, w, b, stride):
    """Direct 7-loop "same" convolution, the oracle for conv2d_forward."""
    n, h, wd, c = x.shape
    kh, kw, _, cout = w.shape
    oh, pt, pb = T.same_padding(h, stride, kh)
    ow, pl, pr = T.same_padding(wd, stride, kw)
    xp = np.zeros((n, h + pt + pb, wd + pl + pr, c))
    xp[:, pt : pt + h, pl : pl + wd] = x
    out = np.zeros((n, oh, ow, cout))
    for i in range(n):
        for r in range(oh):
            for q in range(ow):
                for k in range(cout):
                    acc = b[k]
                    for a in range(kh):
                        for d in range(kw):
                            for ch in range(c):
                                acc += xp[i, r * stride + a, q * stride + d, ch] * w[a, d, ch, k]
                    out[i, r, q, k] = acc
    return out


def conv(w, b=None, stride=1):
    w = np.asarray(w, np.float32)
    b = np.zeros(w.shape[3], np.float32) if b is None else np.asarray(b, np.float32)
    return T.ConvParams(w, b, stride)


# --------------------------------------------------------------------- conv


def test_conv_canonical_input_shape():
    x = np.zeros((1, 256, 256, 3), np.float32)
    p = conv(np.zeros((3, 3, 3, 64)), stride=2)
    assert T.conv2d_forward(x, p).shape == (1, 128, 128, 64)


def test_conv_identity_kernel():
    w = np.zeros((3, 3, 1, 1))
    w[1, 1, 0, 0] = 1
    x = np.ones((1, 2, 2, 1), np.float32)
    np.testing.assert_array_equal(T.conv2d_forward(x, conv(w)), x)


def test_conv_all_ones_kernel_on_2x2():
    x = np.ones((1, 2, 2, 1), np.float32)
    out = T.conv2d_forward(x, conv(np.ones((3, 3, 1, 1))))
    expected = loop_conv(x, np.ones((3, 3, 1, 1)), np.zeros(1), 1)
    np.testing.assert_array_equal(expected[0, ..., 0], [[4, 4], [4, 4]])
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("hw", [(5, 7), (6, 6), (1, 3)])
def test_conv_matches_loop_oracle(stride, hw):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, *hw, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    got = T.conv2d_forward(x, T.ConvParams(w, b, stride))
    np.testing.assert_allclose(got, loop_conv(x, w, b, stride), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ConfigurationError):
        T.conv2d_forward(np.zeros((1, 4, 4, 2), np.float32), conv(np.zeros((3, 3, 3, 1))))


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 64), w=st.integers(1, 64), stride=st.sampled_from([1, 2]))
def test_conv_output_shape_is_ceil(h, w, stride):
    out = T.conv2d_forward(np.zeros((1, h, w, 1), np.float32), conv(np.zeros((3, 3, 1, 2)), stride=stride))
    assert out.shape == (1, math.ceil(h / stride), math.ceil(w / stride), 2)


def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 5, 5, 2)).astype(np.float32)
    p = conv(rng.normal(size=(3, 3, 2, 3)), stride=2)
    gx, gw, gb = T.conv2d_backward(x, p, np.zeros((1, 3, 3, 3), np.float32))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_linear_in_upstream():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 6, 6, 2)).astype(np.float32)
    p = conv(rng.normal(size=(3, 3, 2, 2)))
    up = rng.normal(size=(1, 6, 6, 2)).astype(np.float32)
    g1 = T.conv2d_backward(x, p, up)
    g2 = T.conv2d_backward(x, p, 2 * up)
    for a, b in zip(g1, g2):
        np.testing.assert_array_equal(2 * a, b)


def test_conv_backward_bias_is_upstream_sum():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 4, 4, 1)).astype(np.float32)
    up = rng.normal(size=(2, 4, 4, 2)).astype(np.float32)
    _, _, gb = T.conv2d_backward(x, conv(np.zeros((3, 3, 1, 2))), up)
    np.testing.assert_array_equal(gb, up.sum(axis=(0, 1, 2)))


def test_conv_backward_shape_mismatch():
    with pytest.raises(ConfigurationError):
        T.conv2d_backward(np.zeros((1, 4, 4, 1), np.float32), conv(np.zeros((3, 3, 1, 1))),
                          np.zeros((1, 2, 2, 1), np.float32))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients_float64(stride):
    rng = np.random.default_rng(10 + stride)
    x = rng.normal(size=(1, 6, 6, 2))
    w = rng.normal(size=(3, 3, 2, 2))
    b = rng.normal(size=2)
    out_shape = T.conv2d_forward(x, T.ConvParams(w, b, stride)).shape
    r = rng.normal(size=out_shape)
    gx, gw, gb = T.conv2d_backward(x, T.ConvParams(w, b, stride), r)
    h = 1e-5
    assert rel_err(gx, numerical_grad(lambda v: np.sum(T.conv2d_forward(v, T.ConvParams(w, b, stride)) * r), x, h)) < 1e-6
    assert rel_err(gw, numerical_grad(lambda v: np.sum(T.conv2d_forward(x, T.ConvParams(v, b, stride)) * r), w, h)) < 1e-6
    assert rel_err(gb, numerical_grad(lambda v: np.sum(T.conv2d_forward(x, T.ConvParams(w, v, stride)) * r), b, h)) < 1e-6


def test_conv_gradients_float32_random_1x6x6x2():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 6, 6, 2)).astype(np.float32)
    w = rng.normal(size=(3, 3, 2, 2)).astype(np.float32)
    b = np.zeros(2, np.float32)
    r = rng.normal(size=(1, 6, 6, 2))
    gx, gw, _ = T.conv2d_backward(x, T.ConvParams(w, b, 1), r.astype(np.float32))
    w64 = w.astype(np.float64)
    fd_x = numerical_grad(lambda v: np.sum(T.conv2d_forward(v, T.ConvParams(w64, b.astype(float), 1)) * r), x, 1e-3)
    fd_w = numerical_grad(lambda v: np.sum(T.conv2d_forward(x.astype(float), T.ConvParams(v, b.astype(float), 1)) * r), w, 1e-3)
    assert rel_err(gx, fd_x) < 1e-3
    assert rel_err(gw, fd_w) < 1e-3


# ---------------------------------------------------------------- batchnorm


def test_bn_constant_input_gives_beta():
    p = T.BatchNormParams.identity(2)
    p.beta[:] = [0.5, -1.0]
    p.gamma[:] = [3.0, 2.0]
    x = np.empty((2, 3, 3, 2), np.float32)
    x[..., 0], x[..., 1] = 4.0, -2.0
    y, _ = T.batchnorm_forward(x, p, "train")
    np.testing.assert_array_equal(y[..., 0], 0.5)
    np.testing.assert_array_equal(y[..., 1], -1.0)


def test_bn_train_standardizes():
    rng = np.random.default_rng(0)
    x = (rng.normal(size=(4, 5, 5, 3)) * 3 + 2).astype(np.float32)
    y, _ = T.batchnorm_forward(x, T.BatchNormParams.identity(3), "train")
    np.testing.assert_allclose(y.mean(axis=(0, 1, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 1, 2)), 1, atol=1e-5)


def test_bn_infer_scalar_formula():
    p = T.BatchNormParams(np.array([3.0]), np.array([1.0]), np.array([2.0]), np.array([4.0]))
    y, cache = T.batchnorm_forward(np.full((1, 1, 1, 1), 4.0), p, "infer")
    assert cache is None
    assert y[0, 0, 0, 0] == pytest.approx(3 * 2 / math.sqrt(4 + 1e-5) + 1)
    assert y[0, 0, 0, 0] == pytest.approx(4.0, abs=1e-5)


def test_bn_infer_does_not_mutate():
    p = T.BatchNormParams.identity(2)
    before = (p.running_mean.copy(), p.running_var.copy())
    T.batchnorm_forward(np.random.default_rng(0).normal(size=(2, 3, 3, 2)).astype(np.float32), p, "infer")
    np.testing.assert_array_equal(p.running_mean, before[0])
    np.testing.assert_array_equal(p.running_var, before[1])


def test_bn_running_stats_update():
    p = T.BatchNormParams.identity(1, dtype=np.float64, momentum=0.9)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    T.batchnorm_forward(x, p, "train")
    assert p.running_mean[0] == pytest.approx(0.9 * 0 + 0.1 * 2.0)
    assert p.running_var[0] == pytest.approx(0.9 * 1 + 0.1 * 1.0)


def test_bn_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        T.batchnorm_forward(np.ones((1, 1, 1, 2), np.float32), T.BatchNormParams.identity(2), "train")


def test_bn_backward_needs_cache():
    with pytest.raises(UsageError):
        T.batchnorm_backward(None, np.zeros((1, 1, 1, 1)))


def test_bn_backward_zero_and_beta():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 3, 2)).astype(np.float32)
    _, cache = T.batchnorm_forward(x, T.BatchNormParams.identity(2), "train")
    gx, gg, gb = T.batchnorm_backward(cache, np.zeros_like(x))
    assert not gx.any() and not gg.any() and not gb.any()
    up = rng.normal(size=x.shape).astype(np.float32)
    _, _, gb = T.batchnorm_backward(cache, up)
    np.testing.assert_allclose(gb, up.sum(axis=(0, 1, 2)), rtol=1e-6)


def _bn_loss(x, gamma, beta, r):
    p = T.BatchNormParams(gamma, beta, np.zeros_like(gamma), np.ones_like(gamma))
    return np.sum(T.batchnorm_forward(x, p, "train")[0] * r)


def test_bn_gradients_float64():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 3, 2))
    gamma, beta = rng.normal(size=2), rng.normal(size=2)
    r = rng.normal(size=x.shape)
    p = T.BatchNormParams(gamma, beta, np.zeros(2), np.ones(2))
    _, cache = T.batchnorm_forward(x, p, "train")
    gx, gg, gb = T.batchnorm_backward(cache, r)
    h = 1e-5
    assert rel_err(gx, numerical_grad(lambda v: _bn_loss(v, gamma, beta, r), x, h)) < 1e-6
    assert rel_err(gg, numerical_grad(lambda v: _bn_loss(x, v, beta, r), gamma, h)) < 1e-6
    assert rel_err(gb, numerical_grad(lambda v: _bn_loss(x, gamma, v, r), beta, h)) < 1e-6


# ----------------------------------------------------- relu, gap, loss, adam


def test_relu_values_and_gate():
    np.testing.assert_array_equal(T.relu_forward(np.array([-1.0, 2.0])), [0.0, 2.0])
    assert T.relu_backward(np.array([-1.0]), np.array([5.0]))[0] == 0.0
    assert T.relu_backward(np.array([2.0]), np.array([5.0]))[0] == 5.0


def test_relu_gradient_away_from_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 3, 2))
    x[np.abs(x) < 1e-2] = 0.5
    r = rng.normal(size=x.shape)
    g = T.relu_backward(x, r)
    assert rel_err(g, numerical_grad(lambda v: np.sum(T.relu_forward(v) * r), x, 1e-3)) < 1e-6


def test_gap_values():
    s = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 2, 2, 1)
    assert T.global_average_pool(s)[0] == 4.0
    assert T.global_average_pool(np.full((1, 16, 16, 1), 2.5))[0] == 2.5


def test_gap_backward_conserves_upstream():
    g = T.global_average_pool_backward((3, 4, 5, 1), np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(g.sum(axis=(1, 2, 3)), [1.0, -2.0, 0.5])


def test_gap_rejects_multichannel():
    with pytest.raises(ConfigurationError):
        T.global_average_pool(np.zeros((1, 2, 2, 2)))


def test_bce_examples():
    loss, grad = T.sigmoid_bce_loss(0.0, 1)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    assert grad == -0.5
    assert T.sigmoid_bce_loss(1e4, 1)[0] == pytest.approx(0.0, abs=1e-12)
    assert T.sigmoid_bce_loss(math.log(3), 0)[0] == pytest.approx(math.log(4), abs=1e-12)


@given(s=st.floats(-1e4, 1e4), y=st.sampled_from([0, 1]))
def test_bce_nonnegative_and_finite(s, y):
    loss, grad = T.sigmoid_bce_loss(s, y)
    assert loss >= 0 and math.isfinite(loss) and -1 <= grad <= 1


def test_bce_gradient_matches_fd():
    s = np.linspace(-6, 6, 25)
    for y in (0, 1):
        _, g = T.sigmoid_bce_loss(s, np.full_like(s, y))
        fd = numerical_grad(lambda v: float(np.sum(T.sigmoid_bce_loss(v, np.full_like(v, y))[0])), s, 1e-6)
        assert rel_err(g, fd) < 1e-8


def test_adam_first_step_magnitude():
    p = {"w": np.zeros(4)}
    T.adam_step(p, {"w": np.ones(4)}, st_ := T.AdamState())
    np.testing.assert_allclose(p["w"], -1e-3 / (1 + 1e-8), rtol=1e-12)
    assert st_.t == 1


def test_adam_zero_gradient_no_change():
    p = {"w": np.array([1.0, -2.0])}
    T.adam_step(p, {"w": np.zeros(2)}, T.AdamState())
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_matches_reference_trace():
    def reference(x, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        m = v = 0.0
        for t, g in enumerate(grads, 1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        return x

    gs = [0.3, -1.2, 2.5, 0.0, -0.7]
    p = {"x": np.array(1.5)}
    state = T.AdamState()
    for g in gs:
        T.adam_step(p, {"x": np.array(g)}, state)
    assert float(p["x"]) == pytest.approx(reference(1.5, gs), abs=1e-9)
    assert state.t == 5
    assert float(state.v["x"]) >= 0


def test_adam_rejects_nonfinite():
    p = {"w": np.zeros(2)}
    state = T.AdamState()
    with pytest.raises(TrainingDivergenceError):
        T.adam_step(p, {"w": np.array([1.0, np.nan])}, state)
    assert state.t == 0 and not p["w"].any()


def test_kernels_bit_deterministic():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 9, 9, 4)).astype(np.float32)
    p = conv(rng.normal(size=(3, 3, 4, 8)), rng.normal(size=8), stride=2)
    a = T.conv2d_forward(x, p)
    b = T.conv2d_forward(x.copy(), p)
    assert a.tobytes() == b.tobytes()
    up = rng.normal(size=a.shape).astype(np.float32)
    for g1, g2 in zip(T.conv2d_backward(x, p, up), T.conv2d_backward(x, p, up)):
        assert g1.tobytes() == g2.tobytes()
