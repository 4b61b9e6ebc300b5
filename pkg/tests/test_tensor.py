import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarcodesign import tensor as T
from oracles import central_diff, max_rel_err, naive_conv, naive_maxpool


def _loss_fn(forward, proj):
    return lambda: float((forward() * proj).sum())


# ------------------------------------------------------------------ conv


def test_conv_sum_of_ones():
    out, _ = T.conv2d_fwd(np.ones((1, 3, 3), np.float32), np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 9.0


def test_conv_zero_kernel_gives_bias(rng):
    x = rng.standard_normal((2, 7, 5)).astype(np.float32)
    b = np.array([1.5, -2.0, 0.25], np.float32)
    out, _ = T.conv2d_fwd(x, np.zeros((3, 2, 3, 3), np.float32), b, stride=2, padding=1)
    assert np.all(out == b[:, None, None])


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1), (1, 2), (3, 0)])
def test_conv_matches_naive_loops(rng, stride, pad):
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out, _ = T.conv2d_fwd(x, w, b, stride, pad)
    np.testing.assert_allclose(out, naive_conv(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_float32_within_tolerance_of_oracle(rng):
    x = rng.standard_normal((2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    out, _ = T.conv2d_fwd(x, w, b, 2, 1)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, naive_conv(x, w, b, 2, 1), atol=1e-5)


def test_conv_batched_equals_per_image(rng):
    x = rng.standard_normal((4, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    batch, _ = T.conv2d_fwd(x, w, None, 1, 1)
    for i in range(4):
        single, _ = T.conv2d_fwd(x[i], w, None, 1, 1)
        np.testing.assert_array_equal(batch[i], single)


@pytest.mark.parametrize("x_shape,w_shape,match", [
    ((3, 5, 5), (2, 2, 3, 3), "C_in"),
    ((2, 2, 2), (1, 2, 3, 3), "K"),
])
def test_conv_shape_errors_name_dimension(x_shape, w_shape, match):
    with pytest.raises(T.ShapeError, match=match):
        T.conv2d_fwd(np.zeros(x_shape), np.zeros(w_shape), None)


def test_conv_bwd_zero_upstream(rng):
    x = rng.standard_normal((2, 4, 4))
    out, cache = T.conv2d_fwd(x, rng.standard_normal((3, 2, 3, 3)), np.zeros(3), 1, 1)
    gx, gw, gb = T.conv2d_bwd(cache, np.zeros_like(out))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_bwd_requires_cache():
    with pytest.raises(ValueError):
        T.conv2d_bwd(None, np.zeros((1, 1, 1)))


def test_conv_1x1_weight_gradient(rng):
    x = rng.standard_normal((3, 4, 5))
    g = rng.standard_normal((2, 4, 5))
    _, cache = T.conv2d_fwd(x, rng.standard_normal((2, 3, 1, 1)), None)
    _, gw, _ = T.conv2d_bwd(cache, g)
    expect = np.einsum("ihw,ohw->oi", x, g)
    np.testing.assert_allclose(gw[:, :, 0, 0], expect, rtol=1e-12)


@pytest.mark.parametrize("c_in,c_out,k,stride,pad", [(2, 3, 3, 1, 0), (1, 2, 3, 2, 1), (3, 2, 1, 1, 0), (2, 2, 2, 2, 1)])
def test_conv_gradients_finite_difference(rng, c_in, c_out, k, stride, pad):
    x = rng.standard_normal((2, c_in, 5, 5))
    w = rng.standard_normal((c_out, c_in, k, k))
    b = rng.standard_normal(c_out)
    out, cache = T.conv2d_fwd(x, w, b, stride, pad)
    proj = rng.standard_normal(out.shape)
    gx, gw, gb = T.conv2d_bwd(cache, proj)
    f = _loss_fn(lambda: T.conv2d_fwd(x, w, b, stride, pad)[0], proj)
    assert max_rel_err(gx, central_diff(f, x)) < 1e-3
    assert max_rel_err(gw, central_diff(f, w)) < 1e-3
    assert max_rel_err(gb, central_diff(f, b)) < 1e-3


# --------------------------------------------------------------- max-pool


def test_maxpool_two_by_two():
    out, idx = T.maxpool_fwd(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    assert out.tolist() == [[[4.0]]]
    g = T.maxpool_bwd(idx, np.ones((1, 1, 1)))
    assert g.tolist() == [[[0.0, 0.0], [0.0, 1.0]]]


def test_maxpool_constant_input_routes_to_first_element():
    x = np.full((1, 4, 4), 3.0)
    out, idx = T.maxpool_fwd(x, 2, 2)
    assert np.all(out == 3.0)
    g = T.maxpool_bwd(idx, np.ones_like(out))
    expect = np.zeros((4, 4))
    expect[::2, ::2] = 1.0
    np.testing.assert_array_equal(g[0], expect)


def test_maxpool_overlapping_windows_accumulate():
    x = np.array([[[0.0, 5.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]])
    _, idx = T.maxpool_fwd(x, 2, 1)
    g = T.maxpool_bwd(idx, np.ones((1, 2, 2)))
    assert g[0, 0, 1] == 2.0  # the 5 wins both top windows


@pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 2, 1), (2, 1, 0), (3, 3, 1)])
def test_maxpool_matches_naive(rng, k, stride, pad):
    x = rng.standard_normal((3, 7, 6))
    out, _ = T.maxpool_fwd(x, k, stride, pad)
    np.testing.assert_array_equal(out, naive_maxpool(x, k, stride, pad))


def test_maxpool_padding_never_wins():
    x = np.full((1, 2, 2), -1e30)
    out, _ = T.maxpool_fwd(x, 2, 2, 1)
    assert np.all(out == -1e30)


def test_maxpool_window_too_large():
    with pytest.raises(T.ShapeError):
        T.maxpool_fwd(np.zeros((1, 2, 2)), 3, 1)


def test_maxpool_gradient_finite_difference(rng):
    # distinct, well-separated values so a 1e-3 step never changes the argmax
    x = (rng.permutation(4 * 6 * 6).reshape(4, 6, 6) * 0.1).astype(np.float64)
    out, idx = T.maxpool_fwd(x, 2, 2)
    proj = rng.standard_normal(out.shape)
    g = T.maxpool_bwd(idx, proj)
    num = central_diff(_loss_fn(lambda: T.maxpool_fwd(x, 2, 2)[0], proj), x)
    assert max_rel_err(g, num) < 1e-3


# ------------------------------------------------------------- fc / relu


def test_fc_identity_and_bias(rng):
    x = rng.standard_normal(6)
    out, _ = T.fc_fwd(x, np.eye(6), np.zeros(6))
    np.testing.assert_array_equal(out, x)
    b = rng.standard_normal(3)
    out, _ = T.fc_fwd(x, np.zeros((3, 6)), b)
    np.testing.assert_array_equal(out, b)


def test_fc_gradient_finite_difference(rng):
    x = rng.standard_normal((3, 8))
    w = rng.standard_normal((4, 8))
    b = rng.standard_normal(4)
    out, cache = T.fc_fwd(x, w, b)
    proj = rng.standard_normal(out.shape)
    gx, gw, gb = T.fc_bwd(cache, proj)
    f = _loss_fn(lambda: T.fc_fwd(x, w, b)[0], proj)
    for analytic, arr in ((gx, x), (gw, w), (gb, b)):
        assert max_rel_err(analytic, central_diff(f, arr)) < 1e-3


def test_relu_gradient(rng):
    x = rng.standard_normal((5, 7))
    x[np.abs(x) < 0.05] = 0.5  # keep away from the kink
    out, mask = T.relu_fwd(x)
    assert np.all(out >= 0)
    proj = rng.standard_normal(out.shape)
    num = central_diff(_loss_fn(lambda: T.relu_fwd(x)[0], proj), x)
    assert max_rel_err(T.relu_bwd(mask, proj), num) < 1e-3


# -------------------------------------------------------------- batchnorm


def _bn_params(rng, c):
    return (rng.uniform(0.5, 2, c), rng.standard_normal(c), rng.standard_normal(c) * 0.1, rng.uniform(0.5, 2, c))


def test_batchnorm_train_gradient(rng):
    x = rng.standard_normal((4, 3, 3, 3))
    gamma, beta, rm, rv = _bn_params(rng, 3)
    out, cache, _ = T.batchnorm_fwd(x, gamma, beta, rm, rv, "train")
    proj = rng.standard_normal(out.shape)
    gx, gg, gb = T.batchnorm_bwd(cache, proj)
    f = _loss_fn(lambda: T.batchnorm_fwd(x, gamma, beta, rm, rv, "train")[0], proj)
    for analytic, arr in ((gx, x), (gg, gamma), (gb, beta)):
        assert max_rel_err(analytic, central_diff(f, arr)) < 1e-3


def test_batchnorm_eval_gradient(rng):
    x = rng.standard_normal((2, 3, 2, 2))
    gamma, beta, rm, rv = _bn_params(rng, 3)
    out, cache, _ = T.batchnorm_fwd(x, gamma, beta, rm, rv, "eval")
    proj = rng.standard_normal(out.shape)
    gx, _, _ = T.batchnorm_bwd(cache, proj)
    f = _loss_fn(lambda: T.batchnorm_fwd(x, gamma, beta, rm, rv, "eval")[0], proj)
    assert max_rel_err(gx, central_diff(f, x)) < 1e-3


def test_batchnorm_running_stats_update(rng):
    x = rng.standard_normal((8, 2, 3, 3))
    _, _, (mean, var) = T.batchnorm_fwd(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), "train", momentum=0.1)
    batch_mean = x.mean(axis=(0, 2, 3))
    batch_var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(mean, 0.1 * batch_mean)
    np.testing.assert_allclose(var, 0.9 + 0.1 * batch_var)


def test_fuse_identity_normalisation(rng):
    w = rng.standard_normal((2, 1, 3, 3))
    b = rng.standard_normal(2)
    fw, fb = T.fuse_batchnorm(w, b, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), eps=1e-5)
    np.testing.assert_allclose(fw, w / np.sqrt(1 + 1e-5))
    np.testing.assert_allclose(fb, b / np.sqrt(1 + 1e-5))


def test_fuse_pure_scaling(rng):
    w = rng.standard_normal((2, 1, 3, 3))
    b = rng.standard_normal(2)
    beta = np.array([0.5, -1.0])
    fw, fb = T.fuse_batchnorm(w, b, np.full(2, 2.0), beta, np.zeros(2), np.ones(2), eps=0.0)
    np.testing.assert_array_equal(fw, 2 * w)
    np.testing.assert_array_equal(fb, 2 * b + beta)


def test_fused_conv_matches_conv_then_bn(rng):
    x = rng.standard_normal((3, 2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    gamma, beta, rm, rv = (a.astype(np.float32) for a in _bn_params(rng, 4))
    ref, _, _ = T.batchnorm_fwd(T.conv2d_fwd(x, w, b, 1, 1)[0], gamma, beta, rm, rv, "eval")
    fw, fb = T.fuse_batchnorm(w, b, gamma, beta, rm, rv)
    fused, _ = T.conv2d_fwd(x, fw, fb, 1, 1)
    np.testing.assert_allclose(fused, ref, atol=1e-5)


# ---------------------------------------------------------- softmax / xent


@pytest.mark.parametrize("n", [2, 4, 10])
def test_uniform_logits_loss_is_log_n(n):
    loss, _ = T.softmax_xent(np.zeros((1, n)), np.array([0]))
    assert loss == pytest.approx(np.log(n), rel=1e-12)


def test_dominant_logit_loss_vanishes():
    logits = np.zeros((1, 4))
    logits[0, 2] = 1e6
    loss, _ = T.softmax_xent(logits, np.array([2]))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_softmax_xent_gradient(rng):
    z = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    loss, g = T.softmax_xent(z, y)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(g, (p - np.eye(4)[y]) / 5, rtol=1e-12)
    num = central_diff(lambda: float(T.softmax_xent(z, y)[0]), z)
    assert max_rel_err(g, num) < 1e-3


def test_softmax_reductions_agree(rng):
    z = rng.standard_normal((3, 4))
    y = np.array([0, 3, 1])
    per, gper = T.softmax_xent(z, y, reduction="none")
    total, gsum = T.softmax_xent(z, y, reduction="sum")
    mean, gmean = T.softmax_xent(z, y)
    assert total == pytest.approx(per.sum()) and mean == pytest.approx(per.mean())
    np.testing.assert_allclose(gsum, gper)
    np.testing.assert_allclose(gmean * 3, gsum)


# ------------------------------------------------------------- properties


@settings(max_examples=60, deadline=None)
@given(size=st.integers(1, 20), k=st.integers(1, 5), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_out_size_matches_window_count(size, k, stride, pad):
    if k > size + 2 * pad:
        return
    count = len(range(0, size + 2 * pad - k + 1, stride))
    assert T.out_size(size, k, stride, pad) == count


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_conv_is_linear_in_input(seed, a, b):
    r = np.random.default_rng(seed)
    x1, x2 = r.standard_normal((2, 2, 5, 5))
    w = r.standard_normal((3, 2, 3, 3))
    lhs, _ = T.conv2d_fwd(a * x1 + b * x2, w, None, 1, 1)
    rhs = a * T.conv2d_fwd(x1, w, None, 1, 1)[0] + b * T.conv2d_fwd(x2, w, None, 1, 1)[0]
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_forward_ops_deterministic(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a, _ = T.conv2d_fwd(x, w, None, 1, 1)
    b, _ = T.conv2d_fwd(x.copy(), w.copy(), None, 1, 1)
    assert a.tobytes() == b.tobytes()
