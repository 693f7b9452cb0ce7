import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cicnet.errors import NumericError, ParameterError, ShapeError
from cicnet.tensor import (as_tensor4, check_finite, check_shape4, crop_spatial,
                           fill_random_gaussian, pad_spatial, slice_channels)


def test_pad_centers_block():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    y = pad_spatial(x, 1, 1, 1, 1, 0.0)
    assert y.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(y[0, 0, 1:3, 1:3], x[0, 0])
    assert y.sum() == x.sum()


def test_pad_zero_is_identity_copy():
    x = np.arange(6.0).reshape(1, 1, 2, 3)
    y = pad_spatial(x, 0, 0, 0, 0)
    np.testing.assert_array_equal(x, y)
    assert y is not x


def test_pad_cifar_margin():
    x = np.ones((1, 3, 32, 32))
    y = pad_spatial(x, 4, 4, 4, 4, -1.0)
    assert y.shape == (1, 3, 40, 40)
    assert (y[:, :, :4] == -1).all() and (y[:, :, 4:36, 4:36] == 1).all()


def test_pad_rejects_negative():
    with pytest.raises(ParameterError):
        pad_spatial(np.ones((1, 1, 2, 2)), -1, 0, 0, 0)


def test_slice_channels_examples():
    x = np.array([10.0, 20, 30, 40]).reshape(1, 4, 1, 1)
    np.testing.assert_array_equal(slice_channels(x, 0, 4), x)
    np.testing.assert_array_equal(slice_channels(x, 1, 2).ravel(), [20, 30])
    big = np.arange(192.0).reshape(1, 192, 1, 1)
    np.testing.assert_array_equal(slice_channels(big, 189, 3).ravel(), [189, 190, 191])
    with pytest.raises(IndexError):
        slice_channels(big, 190, 3)
    with pytest.raises(IndexError):
        slice_channels(big, -1, 2)


def test_gaussian_fill():
    np.testing.assert_array_equal(fill_random_gaussian((2, 2, 2, 2), 3.0, 0.0, 0), np.full((2, 2, 2, 2), 3.0))
    a = fill_random_gaussian((1, 1, 10, 10), 0, 1, 7)
    b = fill_random_gaussian((1, 1, 10, 10), 0, 1, 7)
    assert a.tobytes() == b.tobytes()
    big = fill_random_gaussian((1, 1, 1000, 1000), 0.0, 1.0, 3)
    assert 0.99 <= big.std() <= 1.01
    assert abs(big.mean()) < 0.01
    shifted = fill_random_gaussian((1, 1, 500, 200), 5.0, 2.0, 4)
    assert abs(shifted.mean() - 5.0) < 0.05 and abs(shifted.std() - 2.0) < 0.02
    with pytest.raises(ParameterError):
        fill_random_gaussian((1, 1, 1, 1), 0, -1, 0)


def test_shape_and_finite_checks():
    assert check_shape4([1, 2, 3, 4]) == (1, 2, 3, 4)
    with pytest.raises(ShapeError):
        check_shape4((1, 0, 3, 4))
    with pytest.raises(ShapeError):
        as_tensor4(np.ones((2, 2)))
    assert as_tensor4(np.ones((1, 1, 1, 1), dtype=np.float32)).dtype == np.float64
    with pytest.raises(NumericError):
        check_finite(np.array([1.0, np.nan]))


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.integers(1, 4)] * 4), st.tuples(*[st.integers(0, 3)] * 4), st.integers(0, 2**31))
def test_pad_crop_roundtrip_and_purity(shape, pads, seed):
    x = np.random.default_rng(seed).standard_normal(shape)
    before = x.copy()
    y = crop_spatial(pad_spatial(x, *pads, value=7.0), *pads)
    np.testing.assert_array_equal(y, x)
    np.testing.assert_array_equal(x, before)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(1, 6), st.integers(0, 2**31))
def test_consecutive_windows_overlap(c, length, seed):
    length = min(length, c - 1)
    x = np.random.default_rng(seed).standard_normal((1, c, 2, 2))
    for s in range(c - length):
        a, b = slice_channels(x, s, length), slice_channels(x, s + 1, length)
        np.testing.assert_array_equal(a[:, 1:], b[:, :-1])
