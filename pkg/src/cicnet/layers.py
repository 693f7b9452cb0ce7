"""Forward and backward passes for every layer kind the architectures use.

The central piece is the channel-local convolution (CLC): a kernel that is
shared across spatial positions but slides along the channel axis with a
window of ``window_len`` channels and no channel padding.  Each window
emits ``filters_per_window`` output channels, so ``C_in`` input channels
produce ``(C_in - L + 1) * M`` outputs.  With ``L == C_in`` the layer is an
ordinary dense convolution; with ``M == 1`` and ``L < C_in`` it is the
sparse, locally connected layer of a CiC block.

All functions are pure except :func:`bn_forward` in training mode, which
updates the running statistics held in its :class:`BnState`.
"""
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (DegenerateStatisticsError, LabelError, NumericError,
                     ParameterError, ShapeError)
from .tensor import check_finite

# Upper bound on the im2col buffer per batch chunk (bytes).
_COLS_BUDGET = 96 * 2**20


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ClcSpec:
    """Channel-local convolution kernel description.

    ``kernel`` is the spatial extent, ``window_len`` the channel window L,
    ``filters_per_window`` the number M of filters per window.  ``shared``
    reuses one weight stencil at every channel window.  There is no channel
    padding field on purpose.
    """

    kernel: Tuple[int, int] = (1, 1)
    window_len: int = 1
    filters_per_window: int = 1
    shared: bool = False
    stride: Tuple[int, int] = (1, 1)
    pad: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "pad", _pair(self.pad))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.pad) < 0:
            raise ParameterError(f"invalid spatial geometry in {self}")
        if self.window_len < 1 or self.filters_per_window < 1:
            raise ParameterError("window_len and filters_per_window must be >= 1")

    def windows(self, c_in: int) -> int:
        if self.window_len > c_in:
            raise ShapeError(f"window length {self.window_len} exceeds {c_in} input channels")
        return c_in - self.window_len + 1

    def out_channels(self, c_in: int) -> int:
        return self.windows(c_in) * self.filters_per_window

    def weight_shape(self, c_in: int) -> Tuple[int, int, int, int, int]:
        p_eff = 1 if self.shared else self.windows(c_in)
        kh, kw = self.kernel
        return (p_eff, self.filters_per_window, kh, kw, self.window_len)

    def out_spatial(self, h: int, w: int) -> Tuple[int, int]:
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.pad
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ShapeError(f"padded input {h + 2 * ph}x{w + 2 * pw} smaller than kernel {kh}x{kw}")
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1

    def output_shape(self, in_shape):
        b, c, h, w = in_shape
        return (b, self.out_channels(c)) + self.out_spatial(h, w)


@dataclass
class ClcWeights:
    """Weights of shape ``(P_eff, M, kh, kw, L)`` and one bias per output channel."""

    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, spec: ClcSpec, c_in: int) -> "ClcWeights":
        return cls(np.zeros(spec.weight_shape(c_in)), np.zeros(spec.out_channels(c_in)))

    def validate(self, spec: ClcSpec, c_in: int) -> None:
        if self.weights.shape != spec.weight_shape(c_in):
            raise ShapeError(f"weights shape {self.weights.shape} != {spec.weight_shape(c_in)}")
        if self.bias.shape != (spec.out_channels(c_in),):
            raise ShapeError(f"bias shape {self.bias.shape} != ({spec.out_channels(c_in)},)")


# ---------------------------------------------------------------------------
# channel-local convolution


def _im2col(xpad: np.ndarray, spec: ClcSpec, ho: int, wo: int) -> np.ndarray:
    """Return columns shaped ``(C, kh*kw, b*ho*wo)``."""
    b, c = xpad.shape[:2]
    kh, kw = spec.kernel
    sh, sw = spec.stride
    if (kh, kw) == (1, 1):
        v = xpad[:, :, :sh * (ho - 1) + 1:sh, :sw * (wo - 1) + 1:sw]
        return np.ascontiguousarray(v.transpose(1, 0, 2, 3)).reshape(c, 1, b * ho * wo)
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    win = win[:, :, :sh * (ho - 1) + 1:sh, :sw * (wo - 1) + 1:sw]
    # (b, C, ho, wo, kh, kw) -> (C, kh, kw, b, ho, wo)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))
    return cols.reshape(c, kh * kw, b * ho * wo)


def _col2im(dcols: np.ndarray, spec: ClcSpec, shape, ho: int, wo: int) -> np.ndarray:
    b, c, hp, wp = shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    d = dcols.reshape(c, kh, kw, b, ho, wo)
    dx = np.zeros((b, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += d[:, i, j].transpose(1, 0, 2, 3)
    return dx


def _kernel_matrix(spec: ClcSpec, weights: np.ndarray) -> np.ndarray:
    """``(P_eff, M, kh, kw, L)`` -> ``(P_eff, M, L, kh*kw)``."""
    p_eff, m, kh, kw, L = weights.shape
    return np.ascontiguousarray(weights.transpose(0, 1, 4, 2, 3)).reshape(p_eff, m, L, kh * kw)


def _window_forward(cols: np.ndarray, wk: np.ndarray, P: int) -> np.ndarray:
    """Contract columns ``(C, kk, N)`` against kernels ``(P_eff, M, L, kk)``
    over every channel window; returns ``(P, M, N)``."""
    C, kk, N = cols.shape
    p_eff, M, L, _ = wk.shape
    out = np.empty((P, M, N))
    for p in range(P):
        k = wk[0 if p_eff == 1 else p].reshape(M, L * kk)
        np.matmul(k, cols[p:p + L].reshape(L * kk, N), out=out[p])
    return out


def _window_grad_weights(cols: np.ndarray, dout: np.ndarray, p_eff: int) -> np.ndarray:
    """Weight gradient of :func:`_window_forward`, shaped ``(P_eff, M, L*kk)``."""
    C, kk, N = cols.shape
    P, M, _ = dout.shape
    L = C - P + 1
    g = np.zeros((p_eff, M, L * kk))
    for p in range(P):
        g[0 if p_eff == 1 else p] += dout[p] @ cols[p:p + L].reshape(L * kk, N).T
    return g


def _window_grad_cols(wk: np.ndarray, dout: np.ndarray, C: int) -> np.ndarray:
    """Column gradient of :func:`_window_forward`, shaped ``(C, kk, N)``."""
    p_eff, M, L, kk = wk.shape
    P, _, N = dout.shape
    dcols = np.zeros((C, kk, N))
    for p in range(P):
        k = wk[0 if p_eff == 1 else p].reshape(M, L * kk)
        dcols[p:p + L] += (k.T @ dout[p]).reshape(L, kk, N)
    return dcols


def _transposed_input_grad(dy: np.ndarray, spec: ClcSpec, wk: np.ndarray, c_in: int) -> np.ndarray:
    """Input gradient for stride-1 layers computed as a convolution of ``dy``
    with the spatially flipped kernels.  Avoids materializing the column
    gradient, which dominates when there are many narrow windows.  Returns
    the gradient w.r.t. the spatially padded input."""
    b, _, ho, wo = dy.shape
    p_eff, M, L, kk = wk.shape
    kh, kw = spec.kernel
    P = c_in - L + 1
    flipped = wk.reshape(p_eff, M, L, kh, kw)[:, :, :, ::-1, ::-1]
    # (P_eff, L, M*kk) so that row l pairs with the M*kk column block
    flipped = np.ascontiguousarray(flipped.transpose(0, 2, 1, 3, 4)).reshape(p_eff, L, M * kk)
    dyp = np.pad(dy, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    hp, wp = ho + kh - 1, wo + kw - 1
    dcols = _im2col(dyp, ClcSpec((kh, kw)), hp, wp).reshape(P, M * kk, b * hp * wp)
    acc = np.zeros((c_in, b * hp * wp))
    for p in range(P):
        acc[p:p + L] += flipped[0 if p_eff == 1 else p] @ dcols[p]
    return acc.reshape(c_in, b, hp, wp).transpose(1, 0, 2, 3)


def _batch_chunks(b: int, per_sample_bytes: int):
    step = max(1, _COLS_BUDGET // max(per_sample_bytes, 1))
    for start in range(0, b, step):
        yield slice(start, min(b, start + step))


def _clc_geometry(x: np.ndarray, spec: ClcSpec, w: ClcWeights):
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 input, got {x.shape}")
    b, c, h, wd = x.shape
    P = spec.windows(c)
    w.validate(spec, c)
    ho, wo = spec.out_spatial(h, wd)
    return b, c, P, ho, wo


def clc_forward(x: np.ndarray, spec: ClcSpec, w: ClcWeights) -> np.ndarray:
    """Channel-local convolution; output shape ``(B, P*M, H_out, W_out)``.

    Output channel ``j*M + m`` is the spatial convolution of kernel
    ``(j if unshared else 0, m)`` with input channels ``j .. j+L-1``.
    """
    b, c, P, ho, wo = _clc_geometry(x, spec, w)
    check_finite(x, "clc input")
    check_finite(w.weights, "clc weights")
    check_finite(w.bias, "clc bias")
    M = spec.filters_per_window
    ph, pw = spec.pad
    wk = _kernel_matrix(spec, w.weights)
    y = np.empty((b, P * M, ho, wo))
    kk = spec.kernel[0] * spec.kernel[1]
    for sl in _batch_chunks(b, 8 * c * kk * ho * wo):
        xp = np.pad(x[sl], ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x[sl]
        cols = _im2col(xp, spec, ho, wo)
        out = _window_forward(cols, wk, P).reshape(P * M, -1, ho, wo)
        y[sl] = out.transpose(1, 0, 2, 3)
    y += w.bias[None, :, None, None]
    return y


def clc_backward(x: np.ndarray, spec: ClcSpec, w: ClcWeights, dy: np.ndarray):
    """Returns ``(dx, ClcWeights(dweights, dbias))``."""
    b, c, P, ho, wo = _clc_geometry(x, spec, w)
    M = spec.filters_per_window
    if dy.shape != (b, P * M, ho, wo):
        raise ShapeError(f"dy shape {dy.shape} != forward output {(b, P * M, ho, wo)}")
    ph, pw = spec.pad
    kh, kw = spec.kernel
    wk = _kernel_matrix(spec, w.weights)
    dwk = np.zeros_like(wk)
    dx = np.empty_like(x, dtype=np.float64)
    p_eff, _, L, _ = wk.shape
    transposed = spec.stride == (1, 1) and P > L
    for sl in _batch_chunks(b, 8 * max(c, P * M) * kh * kw * (ho + kh) * (wo + kw)):
        xp = np.pad(x[sl], ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x[sl]
        cols = _im2col(xp, spec, ho, wo)
        nb = xp.shape[0]
        dout = np.ascontiguousarray(dy[sl].transpose(1, 0, 2, 3)).reshape(P, M, nb * ho * wo)
        dwk += _window_grad_weights(cols, dout, p_eff).reshape(dwk.shape)
        del cols
        if transposed:
            dxp = _transposed_input_grad(dy[sl], spec, wk, c)
        else:
            dxp = _col2im(_window_grad_cols(wk, dout, c), spec, xp.shape, ho, wo)
        dx[sl] = dxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
    dweights = dwk.reshape(p_eff, M, L, kh, kw).transpose(0, 1, 3, 4, 2).copy()
    dbias = dy.sum(axis=(0, 2, 3))
    return dx, ClcWeights(dweights, dbias)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BnState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BnState":
        if not 0 < momentum < 1:
            raise ParameterError("momentum must lie in (0, 1)")
        if eps <= 0:
            raise ParameterError("eps must be positive")
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels),
                   np.ones(channels), momentum, eps)


def _bn_stats(x: np.ndarray):
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise DegenerateStatisticsError("batch norm needs at least two elements per channel in training mode")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var, n


def bn_forward(x: np.ndarray, s: BnState, training: bool) -> np.ndarray:
    check_finite(x, "batch-norm input")
    if training:
        mean, var, n = _bn_stats(x)
        s.running_mean = (1 - s.momentum) * s.running_mean + s.momentum * mean
        s.running_var = (1 - s.momentum) * s.running_var + s.momentum * var * n / (n - 1)
    else:
        mean, var = s.running_mean, s.running_var
    inv = 1.0 / np.sqrt(var + s.eps)
    scale = (s.gamma * inv)[None, :, None, None]
    return (x - mean[None, :, None, None]) * scale + s.beta[None, :, None, None]


def bn_backward(x: np.ndarray, s: BnState, dy: np.ndarray, training: bool = True):
    """Returns ``(dx, dgamma, dbeta)``."""
    if dy.shape != x.shape:
        raise ShapeError(f"dy shape {dy.shape} != x shape {x.shape}")
    if training:
        mean, var, _ = _bn_stats(x)
    else:
        mean, var = s.running_mean, s.running_var
    inv = 1.0 / np.sqrt(var + s.eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    g = (s.gamma * inv)[None, :, None, None]
    if not training:
        return dy * g, dgamma, dbeta
    dx = g * (dy - dy.mean(axis=(0, 2, 3), keepdims=True)
              - xhat * (dy * xhat).mean(axis=(0, 2, 3), keepdims=True))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# elementwise and pooling


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dy, 0.0)


@dataclass
class PoolRecord:
    """What :func:`maxpool_backward` needs: flat argmax indices into the
    padded input plus the geometry to undo the padding."""

    index: np.ndarray
    padded_shape: Tuple[int, int, int, int]
    pad: Tuple[int, int, int, int]


def _pad4(pad) -> Tuple[int, int, int, int]:
    if isinstance(pad, int):
        return (pad,) * 4
    pad = tuple(int(p) for p in pad)
    if len(pad) == 2:
        return (pad[0], pad[0], pad[1], pad[1])
    if len(pad) != 4:
        raise ParameterError(f"pad must have 1, 2 or 4 entries, got {pad}")
    return pad


def pool_output_size(h: int, w: int, window, stride, pad) -> Tuple[int, int]:
    ph, pw = _pair(window)
    sh, sw = _pair(stride)
    top, bottom, left, right = _pad4(pad)
    hp, wp = h + top + bottom, w + left + right
    if hp < ph or wp < pw:
        raise ShapeError(f"pool window {ph}x{pw} larger than padded input {hp}x{wp}")
    if max(top, bottom) >= ph or max(left, right) >= pw:
        raise ShapeError("pool padding must be smaller than the window")
    return (hp - ph) // sh + 1, (wp - pw) // sw + 1


def maxpool_forward(x: np.ndarray, window, stride, pad=0):
    """Max pooling with ``-inf`` padding; ties go to the first element in
    row-major order.  Returns ``(y, PoolRecord)``."""
    ph, pw = _pair(window)
    sh, sw = _pair(stride)
    top, bottom, left, right = _pad4(pad)
    b, c, h, w = x.shape
    ho, wo = pool_output_size(h, w, window, stride, pad)
    xp = x
    if top or bottom or left or right:
        xp = np.full((b, c, h + top + bottom, w + left + right), -np.inf)
        xp[:, :, top:top + h, left:left + w] = x
    win = sliding_window_view(xp, (ph, pw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    flat = win.reshape(b, c, ho, wo, ph * pw)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    hp, wp = xp.shape[2:]
    rows = np.arange(ho)[:, None] * sh + arg // pw
    cols = np.arange(wo)[None, :] * sw + arg % pw
    plane = (np.arange(b)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (hp * wp)
    index = plane + rows * wp + cols
    return np.ascontiguousarray(y), PoolRecord(index, (b, c, hp, wp), (top, bottom, left, right))


def maxpool_backward(record: PoolRecord, dy: np.ndarray) -> np.ndarray:
    if dy.shape != record.index.shape:
        raise ShapeError(f"dy shape {dy.shape} != pooled shape {record.index.shape}")
    b, c, hp, wp = record.padded_shape
    top, bottom, left, right = record.pad
    dxp = np.bincount(record.index.ravel(), weights=dy.ravel(), minlength=b * c * hp * wp)
    dxp = dxp.reshape(b, c, hp, wp)
    return dxp[:, :, top:hp - bottom, left:wp - right].copy()


def dropout_forward(x: np.ndarray, rate: float, training: bool,
                    seed: Union[int, np.random.Generator, None] = None):
    """Inverted dropout.  Returns ``(y, mask)``; ``mask`` is ``None`` when the
    layer acts as the identity."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask: Optional[np.ndarray], dy: np.ndarray) -> np.ndarray:
    return dy if mask is None else dy * mask


def softmax_xent(logits: np.ndarray, labels):
    """Mean cross-entropy over the batch and its gradient.

    ``logits`` is ``(B, C, 1, 1)`` (or ``(B, C)``); the gradient has the
    same shape.
    """
    z = logits.reshape(logits.shape[0], -1)
    if logits.ndim == 4 and logits.shape[2:] != (1, 1):
        raise ShapeError(f"logits must have 1x1 spatial extent, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    B, C = z.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} != ({B},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise LabelError(f"labels must lie in [0, {C})")
    check_finite(z, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = -logp[np.arange(B), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    grad /= B
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return float(loss), grad.reshape(logits.shape)
