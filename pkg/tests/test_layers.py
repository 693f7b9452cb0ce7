import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cicnet import layers as L
from cicnet.errors import (DegenerateStatisticsError, LabelError, NumericError,
                           ParameterError, ShapeError)
from cicnet.gradcheck import check_clc


def reference_conv(x, spec, w):
    """Direct nested-loop evaluation, written independently of im2col."""
    B, C, H, W = x.shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.pad
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho, wo = (H + 2 * ph - kh) // sh + 1, (W + 2 * pw - kw) // sw + 1
    P, M, Lw = C - spec.window_len + 1, spec.filters_per_window, spec.window_len
    y = np.zeros((B, P * M, ho, wo))
    for j in range(P):
        for m in range(M):
            k = w.weights[0 if spec.shared else j, m]  # (kh, kw, L)
            for i in range(ho):
                for t in range(wo):
                    patch = xp[:, j:j + Lw, i * sh:i * sh + kh, t * sw:t * sw + kw]  # (B, L, kh, kw)
                    y[:, j * M + m, i, t] = np.einsum("blhw,hwl->b", patch, k) + w.bias[j * M + m]
    return y


def random_weights(spec, c_in, rng):
    return L.ClcWeights(rng.standard_normal(spec.weight_shape(c_in)), rng.standard_normal(spec.out_channels(c_in)))


def test_table2_sparse_shape(rng):
    spec = L.ClcSpec((1, 1), 3, 1, False)
    x = rng.standard_normal((1, 192, 16, 16))
    y = L.clc_forward(x, spec, random_weights(spec, 192, rng))
    assert y.shape == (1, 190, 16, 16)


def test_unit_window_is_identity(rng):
    spec = L.ClcSpec((1, 1), 1, 1, False)
    x = rng.standard_normal((2, 5, 3, 3))
    w = L.ClcWeights(np.ones(spec.weight_shape(5)), np.zeros(5))
    np.testing.assert_array_equal(L.clc_forward(x, spec, w), x)


def test_hand_evaluated_windows():
    x = np.array([1.0, 2, 3, 4]).reshape(1, 4, 1, 1)
    spec = L.ClcSpec((1, 1), 2, 1, False)
    w = L.ClcWeights(np.ones(spec.weight_shape(4)), np.zeros(3))
    np.testing.assert_array_equal(L.clc_forward(x, spec, w).ravel(), [3, 5, 7])
    shared = L.ClcSpec((1, 1), 2, 1, True)
    ws = L.ClcWeights(np.array([1.0, -1.0]).reshape(1, 1, 1, 1, 2), np.zeros(3))
    np.testing.assert_array_equal(L.clc_forward(x, shared, ws).ravel(), [-1, -1, -1])


def test_clc_errors(rng):
    spec = L.ClcSpec((1, 1), 5, 1)
    with pytest.raises(ShapeError):
        L.clc_forward(np.ones((1, 4, 2, 2)), spec, L.ClcWeights(np.ones((1, 1, 1, 1, 5)), np.zeros(1)))
    spec = L.ClcSpec((3, 3), 2, 1)
    w = random_weights(spec, 3, rng)
    with pytest.raises(ShapeError):
        L.clc_forward(np.ones((1, 3, 2, 2)), spec, w)
    w.weights[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        L.clc_forward(np.ones((1, 3, 4, 4)), spec, w)
    with pytest.raises(ParameterError):
        L.ClcSpec((0, 1), 1)


@pytest.mark.parametrize("kernel,stride,pad,Lw,M,shared", [
    ((3, 3), (1, 1), (1, 1), 3, 2, False),
    ((3, 3), (1, 1), (1, 1), 2, 1, True),
    ((2, 3), (2, 1), (0, 1), 4, 3, False),
    ((5, 5), (1, 1), (2, 2), 6, 1, False),
    ((1, 1), (1, 1), (0, 0), 1, 4, True),
])
def test_matches_direct_loops(rng, kernel, stride, pad, Lw, M, shared):
    spec = L.ClcSpec(kernel, Lw, M, shared, stride, pad)
    x = rng.standard_normal((2, 6, 7, 6))
    w = random_weights(spec, 6, rng)
    np.testing.assert_allclose(L.clc_forward(x, spec, w), reference_conv(x, spec, w), rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.sampled_from([1, 3]), st.integers(0, 2**31))
def test_dense_reduction(c_in, c_out, k, seed):
    rng = np.random.default_rng(seed)
    spec = L.ClcSpec((k, k), c_in, c_out, False, 1, k // 2)
    assert spec.out_channels(c_in) == c_out
    x = rng.standard_normal((2, c_in, 5, 5))
    w = random_weights(spec, c_in, rng)
    np.testing.assert_allclose(L.clc_forward(x, spec, w), reference_conv(x, spec, w), rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 300), st.data())
def test_channel_shape_law(c_in, data):
    Lw = data.draw(st.integers(1, c_in - 1))
    assert L.ClcSpec((1, 1), Lw, 1).out_channels(c_in) == c_in - Lw + 1


def test_translation_equivariance(rng):
    spec = L.ClcSpec((3, 3), 2, 2, False, 1, 1)
    w = random_weights(spec, 4, rng)
    x = np.zeros((1, 4, 12, 12))
    x[:, :, 3:7, 3:7] = rng.standard_normal((1, 4, 4, 4))
    shifted = np.roll(x, (2, 3), axis=(2, 3))
    y, ys = L.clc_forward(x, spec, w), L.clc_forward(shifted, spec, w)
    np.testing.assert_allclose(ys[:, :, 2:10, 3:11], y[:, :, 0:8, 0:8], atol=1e-12)


def test_shared_is_structurally_tied():
    for c in (3, 8, 20):
        assert L.ClcSpec((3, 3), 2, 2, True).weight_shape(c)[0] == 1
        assert L.ClcSpec((3, 3), 2, 2, False).weight_shape(c)[0] == c - 1


def test_clc_backward_trivial(rng):
    spec = L.ClcSpec((3, 3), 3, 2, False, 1, 1)
    x = rng.standard_normal((2, 5, 4, 4))
    w = random_weights(spec, 5, rng)
    dx, dw = L.clc_backward(x, spec, w, np.zeros((2, 6, 4, 4)))
    assert not dx.any() and not dw.weights.any() and not dw.bias.any()
    one = L.ClcSpec((1, 1), 1, 1)
    w1 = L.ClcWeights(np.full(one.weight_shape(3), 2.0), np.zeros(3))
    dy = rng.standard_normal((2, 3, 4, 4))
    dx, _ = L.clc_backward(x[:, :3], one, w1, dy)
    np.testing.assert_array_equal(dx, 2 * dy)
    with pytest.raises(ShapeError):
        L.clc_backward(x, spec, w, np.zeros((2, 6, 3, 4)))


def test_clc_backward_finite_diff_tight():
    report = check_clc(L.ClcSpec((3, 3), 3, 2, False, 1, 1), (2, 5, 4, 4), seed=0, tol=1e-6)
    assert report.passed, report.format_table()


@pytest.mark.parametrize("stride,shared", [((1, 1), True), ((2, 2), False), ((2, 1), True)])
def test_clc_backward_other_paths(stride, shared):
    report = check_clc(L.ClcSpec((3, 3), 2, 2, shared, stride, 1), (2, 5, 5, 5), seed=3, tol=1e-6)
    assert report.passed, report.format_table()


def test_large_batch_chunking_consistent(rng, monkeypatch):
    spec = L.ClcSpec((3, 3), 2, 1, False, 1, 1)
    x = rng.standard_normal((6, 4, 6, 6))
    w = random_weights(spec, 4, rng)
    dy = rng.standard_normal((6, 3, 6, 6))
    y = L.clc_forward(x, spec, w)
    dx, dw = L.clc_backward(x, spec, w, dy)
    monkeypatch.setattr(L, "_COLS_BUDGET", 1)
    np.testing.assert_allclose(L.clc_forward(x, spec, w), y, atol=1e-12)
    dx2, dw2 = L.clc_backward(x, spec, w, dy)
    np.testing.assert_allclose(dx2, dx, atol=1e-12)
    np.testing.assert_allclose(dw2.weights, dw.weights, atol=1e-12)


# batch norm

def test_bn_examples():
    s = L.BnState.create(1)
    x = np.full((2, 1, 2, 2), 3.0)
    np.testing.assert_array_equal(L.bn_forward(x, s, True), 0.0)
    s = L.BnState.create(2)
    s.gamma[:] = 0
    s.beta[:] = [1.5, -2.0]
    y = L.bn_forward(np.random.default_rng(0).standard_normal((3, 2, 2, 2)), s, True)
    np.testing.assert_array_equal(y[:, 0], 1.5)
    np.testing.assert_array_equal(y[:, 1], -2.0)
    s = L.BnState.create(1, eps=1e-12)
    y = L.bn_forward(np.array([1.0, 3.0]).reshape(2, 1, 1, 1), s, True)
    np.testing.assert_allclose(y.ravel(), [-1, 1], atol=1e-9)


def test_bn_running_stats_and_inference():
    s = L.BnState.create(1)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    L.bn_forward(x, s, True)
    np.testing.assert_allclose(s.running_mean, [0.2])
    np.testing.assert_allclose(s.running_var, [0.9 + 0.1 * 2.0])
    y = L.bn_forward(x, s, False)
    np.testing.assert_allclose(y.ravel(), (x.ravel() - 0.2) / np.sqrt(1.1 + 1e-5))
    assert (s.running_var >= 0).all()


def test_bn_errors():
    with pytest.raises(DegenerateStatisticsError):
        L.bn_forward(np.ones((1, 2, 1, 1)), L.BnState.create(2), True)
    L.bn_forward(np.ones((1, 2, 1, 1)), L.BnState.create(2), False)
    with pytest.raises(ParameterError):
        L.BnState.create(2, momentum=1.0)
    with pytest.raises(ParameterError):
        L.BnState.create(2, eps=0.0)


def test_bn_backward_trivial(rng):
    s = L.BnState.create(3)
    x = rng.standard_normal((4, 3, 2, 2))
    L.bn_forward(x, s, True)
    dx, dg, db = L.bn_backward(x, s, np.zeros_like(x))
    assert not dx.any() and not dg.any() and not db.any()
    dy = rng.standard_normal(x.shape)
    _, _, db = L.bn_backward(x, s, dy)
    np.testing.assert_allclose(db, dy.sum(axis=(0, 2, 3)))


# relu, pool, dropout, softmax

def test_relu():
    np.testing.assert_array_equal(L.relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = np.array([0.5, 2.0])
    np.testing.assert_array_equal(L.relu_forward(x), x)
    np.testing.assert_array_equal(L.relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 7.0])), [0, 7])
    assert L.relu_backward(np.array([0.0]), np.array([3.0]))[0] == 0


def test_maxpool_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    y, rec = L.maxpool_forward(x, 2, 2)
    assert y.ravel().tolist() == [4.0]
    dx = L.maxpool_backward(rec, np.ones_like(y))
    np.testing.assert_array_equal(dx.ravel(), [0, 0, 0, 1])
    y, _ = L.maxpool_forward(np.zeros((1, 1, 32, 32)), 3, 2, (0, 1, 0, 1))
    assert y.shape == (1, 1, 16, 16)
    y, _ = L.maxpool_forward(np.arange(64.0).reshape(1, 1, 8, 8), 8, 1)
    assert y.shape == (1, 1, 1, 1) and y.item() == 63
    with pytest.raises(ShapeError):
        L.maxpool_forward(np.zeros((1, 1, 2, 2)), 3, 1)


def test_maxpool_ties_and_negative_padding():
    x = np.full((1, 1, 2, 2), 5.0)
    y, rec = L.maxpool_forward(x, 2, 2)
    np.testing.assert_array_equal(L.maxpool_backward(rec, np.ones_like(y)).ravel(), [1, 0, 0, 0])
    neg = -np.ones((1, 1, 4, 4)) - np.arange(16.0).reshape(1, 1, 4, 4)
    y, _ = L.maxpool_forward(neg, 3, 2, (0, 1, 0, 1))
    assert (y < 0).all()


def test_dropout():
    x = np.ones((1, 1, 1000, 1000))
    y, mask = L.dropout_forward(x, 0.0, True, 0)
    assert mask is None and y is x
    y, mask = L.dropout_forward(x, 0.5, False, 0)
    assert mask is None and y is x
    y, mask = L.dropout_forward(x, 0.5, True, 0)
    assert 0.99 <= y.mean() <= 1.01
    assert set(np.unique(y)) <= {0.0, 2.0}
    np.testing.assert_array_equal(L.dropout_backward(mask, x), y)
    a, _ = L.dropout_forward(x[..., :10, :10], 0.3, True, 5)
    b, _ = L.dropout_forward(x[..., :10, :10], 0.3, True, 5)
    np.testing.assert_array_equal(a, b)
    for bad in (-0.1, 1.0):
        with pytest.raises(ParameterError):
            L.dropout_forward(x, bad, True, 0)


def test_softmax_xent_examples():
    loss, _ = L.softmax_xent(np.zeros((3, 10, 1, 1)), [0, 4, 9])
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    loss, _ = L.softmax_xent(np.array([[1e4, 0.0, 0.0]]).reshape(1, 3, 1, 1), [0])
    assert loss == pytest.approx(0.0, abs=1e-12)
    loss, _ = L.softmax_xent(np.array([[1.0, 2.0]]).reshape(1, 2, 1, 1), [1])
    assert loss == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.313262, abs=1e-6)
    with pytest.raises(LabelError):
        L.softmax_xent(np.zeros((1, 3, 1, 1)), [3])
    with pytest.raises(LabelError):
        L.softmax_xent(np.zeros((1, 3, 1, 1)), [-1])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(2, 12), st.integers(0, 2**31))
def test_softmax_rows_sum_to_zero(b, c, seed):
    rng = np.random.default_rng(seed)
    logits = 10 * rng.standard_normal((b, c, 1, 1))
    _, g = L.softmax_xent(logits, rng.integers(0, c, b))
    np.testing.assert_allclose(g.reshape(b, c).sum(axis=1), 0.0, atol=1e-12)
