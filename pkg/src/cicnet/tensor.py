"""Rank-4 (batch, channel, height, width) float64 arrays and the few
whole-tensor helpers the layers need.

Tensors are plain ``numpy.ndarray`` objects; the helpers here never mutate
their inputs.
"""
from typing import Tuple

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

Shape4 = Tuple[int, int, int, int]


def as_tensor4(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array of rank 4."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 tensor, got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
    return arr


def check_shape4(shape) -> Shape4:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid Shape4 {shape}")
    return shape


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def pad_spatial(x: np.ndarray, top: int, bottom: int, left: int, right: int,
                value: float = 0.0) -> np.ndarray:
    """Pad the two spatial axes; the channel axis is never padded."""
    if min(top, bottom, left, right) < 0:
        raise ParameterError("padding must be non-negative")
    x = np.asarray(x)
    if top == bottom == left == right == 0:
        return x.copy()
    B, C, H, W = x.shape
    out = np.full((B, C, H + top + bottom, W + left + right), value, dtype=x.dtype)
    out[:, :, top:top + H, left:left + W] = x
    return out


def crop_spatial(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Inverse of :func:`pad_spatial`."""
    if min(top, bottom, left, right) < 0:
        raise ParameterError("crop margins must be non-negative")
    H, W = x.shape[2], x.shape[3]
    if top + bottom >= H or left + right >= W:
        raise ShapeError(f"cannot crop {(top, bottom, left, right)} from {H}x{W}")
    return x[:, :, top:H - bottom, left:W - right].copy()


def slice_channels(x: np.ndarray, start: int, length: int) -> np.ndarray:
    """Copy of channels ``start .. start+length-1``."""
    C = x.shape[1]
    if start < 0 or length < 1 or start + length > C:
        raise IndexError(f"channel window [{start}, {start + length}) outside [0, {C})")
    return x[:, start:start + length].copy()


def fill_random_gaussian(shape, mean: float, std: float, seed: int) -> np.ndarray:
    if std < 0:
        raise ParameterError("std must be >= 0")
    shape = check_shape4(shape)
    rng = np.random.default_rng(seed)
    return mean + std * rng.standard_normal(shape)
