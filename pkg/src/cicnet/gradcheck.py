"""Independent oracles for the layer implementations.

* :func:`finite_diff` -- central differences of any scalar function.
* :func:`banded_oracle` -- the channel-local convolution at one pixel,
  written as an explicit banded matrix product.
* ``check_*`` helpers -- compare analytic backward passes against
  :func:`finite_diff` and summarize the outcome in a :class:`GradReport`.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import layers as L
from .errors import NumericError
from .network import MaxPool, Network, ReLU

REL_FLOOR = 1e-8


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    g = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - g) / np.maximum(np.maximum(np.abs(a), np.abs(g)), floor)


@dataclass
class GroupResult:
    name: str
    max_rel: float
    max_abs: float
    count: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.tol


@dataclass
class GradReport:
    tol: float
    groups: List[GroupResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    @property
    def max_rel(self) -> float:
        return max((g.max_rel for g in self.groups), default=0.0)

    @property
    def max_abs(self) -> float:
        return max((g.max_abs for g in self.groups), default=0.0)

    def add(self, name: str, analytic, numeric) -> GroupResult:
        a = np.asarray(analytic, dtype=np.float64).ravel()
        g = np.asarray(numeric, dtype=np.float64).ravel()
        res = GroupResult(name, float(rel_error(a, g).max(initial=0.0)),
                          float(np.abs(a - g).max(initial=0.0)), a.size, self.tol)
        self.groups.append(res)
        return res

    def format_table(self) -> str:
        width = max([len(g.name) for g in self.groups] + [5])
        lines = [f"{'group':<{width}}  {'count':>6}  {'max_rel':>10}  {'max_abs':>10}  result"]
        for g in self.groups:
            lines.append(f"{g.name:<{width}}  {g.count:>6}  {g.max_rel:>10.3e}  {g.max_abs:>10.3e}  "
                         f"{'PASS' if g.passed else 'FAIL'}")
        lines.append(f"tolerance {self.tol:g}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5,
                indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place and restored.  With ``indices`` only those
    flat coordinates are evaluated (others are left at zero).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def banded_oracle(x_pixel, spec: L.ClcSpec, w: L.ClcWeights) -> np.ndarray:
    """Apply a 1x1 channel-local convolution to one pixel by building the
    explicit ``(P*M, C_in)`` matrix whose row ``j*M + m`` is nonzero only on
    columns ``j .. j+L-1``."""
    if spec.kernel != (1, 1):
        raise ValueError("banded oracle only covers 1x1 spatial kernels")
    x_pixel = np.asarray(x_pixel, dtype=np.float64)
    c_in = x_pixel.shape[0]
    Lw, M = spec.window_len, spec.filters_per_window
    P = c_in - Lw + 1
    A = np.zeros((P * M, c_in))
    for j in range(P):
        stencil = w.weights[0 if spec.shared else j]  # (M, 1, 1, L)
        for m in range(M):
            A[j * M + m, j:j + Lw] = stencil[m, 0, 0, :]
    return A @ x_pixel + w.bias


# ---------------------------------------------------------------------------
# single-layer checks


def _projection(shape, rng) -> np.ndarray:
    return rng.standard_normal(shape)


def check_clc(spec: L.ClcSpec, shape, seed: int = 0, tol: float = 1e-4, h: float = 1e-5) -> GradReport:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    c_in = shape[1]
    w = L.ClcWeights(rng.standard_normal(spec.weight_shape(c_in)),
                     rng.standard_normal(spec.out_channels(c_in)))
    r = _projection(spec.output_shape(shape), rng)
    dx, dw = L.clc_backward(x, spec, w, r)
    rep = GradReport(tol)
    rep.add("input", dx, finite_diff(lambda v: float((L.clc_forward(v, spec, w) * r).sum()), x, h))
    rep.add("weights", dw.weights,
            finite_diff(lambda v: float((L.clc_forward(x, spec, L.ClcWeights(v, w.bias)) * r).sum()),
                        w.weights.copy(), h))
    rep.add("bias", dw.bias,
            finite_diff(lambda v: float((L.clc_forward(x, spec, L.ClcWeights(w.weights, v)) * r).sum()),
                        w.bias.copy(), h))
    return rep


def check_bn(shape, seed: int = 0, tol: float = 1e-4, h: float = 1e-5) -> GradReport:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape) * 2 + 0.5
    s = L.BnState.create(shape[1])
    s.gamma[:] = rng.standard_normal(shape[1])
    s.beta[:] = rng.standard_normal(shape[1])
    r = _projection(shape, rng)

    def f_x(v):
        return float((L.bn_forward(v, s, True) * r).sum())

    def f_gamma(v):
        old = s.gamma.copy()
        s.gamma[:] = v
        out = float((L.bn_forward(x, s, True) * r).sum())
        s.gamma[:] = old
        return out

    def f_beta(v):
        old = s.beta.copy()
        s.beta[:] = v
        out = float((L.bn_forward(x, s, True) * r).sum())
        s.beta[:] = old
        return out

    dx, dgamma, dbeta = L.bn_backward(x, s, r, training=True)
    rep = GradReport(tol)
    rep.add("input", dx, finite_diff(f_x, x, h))
    rep.add("gamma", dgamma, finite_diff(f_gamma, s.gamma.copy(), h))
    rep.add("beta", dbeta, finite_diff(f_beta, s.beta.copy(), h))
    return rep


def _away_from_zero(shape, rng, margin: float = 1e-3) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) < margin
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) < margin
    return x


def check_relu(shape, seed: int = 0, tol: float = 1e-4, h: float = 1e-5) -> GradReport:
    rng = np.random.default_rng(seed)
    x = _away_from_zero(shape, rng)
    r = _projection(shape, rng)
    rep = GradReport(tol)
    rep.add("input", L.relu_backward(x, r),
            finite_diff(lambda v: float((L.relu_forward(v) * r).sum()), x, h))
    return rep


def _pool_gap_ok(x, window, stride, pad, margin) -> bool:
    ph, pw = L._pair(window)
    sh, sw = L._pair(stride)
    top, bottom, left, right = L._pad4(pad)
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)), constant_values=-np.inf)
    ho, wo = L.pool_output_size(x.shape[2], x.shape[3], window, stride, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (ph, pw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    flat = np.sort(win.reshape(-1, ph * pw), axis=1)
    if flat.shape[1] < 2:
        return True
    top1, top2 = flat[:, -1], flat[:, -2]
    gaps = np.where(np.isfinite(top2), top1 - top2, np.inf)
    # windows tied at exactly zero come from dead ReLUs and carry no gradient
    gaps = np.where((top1 == 0) & (top2 == 0), np.inf, gaps)
    return bool(gaps.min(initial=np.inf) >= margin)


def check_maxpool(shape, window, stride, pad=0, seed: int = 0, tol: float = 1e-4,
                  h: float = 1e-5, margin: float = 1e-3) -> GradReport:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    while not _pool_gap_ok(x, window, stride, pad, margin):
        x = rng.standard_normal(shape)
    y, rec = L.maxpool_forward(x, window, stride, pad)
    r = _projection(y.shape, rng)
    rep = GradReport(tol)
    rep.add("input", L.maxpool_backward(rec, r),
            finite_diff(lambda v: float((L.maxpool_forward(v, window, stride, pad)[0] * r).sum()), x, h))
    return rep


def check_dropout(shape, rate: float, seed: int = 0, tol: float = 1e-4, h: float = 1e-5) -> GradReport:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    r = _projection(shape, rng)
    mask_seed = seed + 1
    _, mask = L.dropout_forward(x, rate, True, mask_seed)
    rep = GradReport(tol)
    rep.add("input", L.dropout_backward(mask, r),
            finite_diff(lambda v: float((L.dropout_forward(v, rate, True, mask_seed)[0] * r).sum()), x, h))
    return rep


def check_softmax_xent(batch: int, classes: int, seed: int = 0, tol: float = 1e-4,
                       h: float = 1e-5) -> GradReport:
    rng = np.random.default_rng(seed)
    # unit-scale logits keep every probability well above the finite-difference noise floor
    z = rng.standard_normal((batch, classes, 1, 1))
    labels = rng.integers(0, classes, batch)
    _, dz = L.softmax_xent(z, labels)
    rep = GradReport(tol)
    rep.add("logits", dz, finite_diff(lambda v: L.softmax_xent(v, labels)[0], z, h))
    return rep


# ---------------------------------------------------------------------------
# whole networks


def kink_margin(net: Network, x: np.ndarray) -> float:
    """Smallest distance of any ReLU input from zero or any max-pool winner
    from its runner-up during a training-mode forward pass."""
    margin = np.inf
    for layer in net.layers:
        if isinstance(layer, ReLU):
            margin = min(margin, float(np.abs(x).min()))
        elif isinstance(layer, MaxPool):
            window, stride, pad = layer.geometry(*x.shape[2:])
            for m in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 0.0):
                if _pool_gap_ok(x, window, stride, pad, m):
                    margin = min(margin, m)
                    break
        x = layer.forward(x, True)
    return margin


def check_network(net: Network, input_shape, tol: float = 1e-4, seed: int = 0, h: float = 1e-5,
                  margin: float = 1e-3, max_resample: int = 500,
                  corrupt: Optional[Dict[str, float]] = None) -> GradReport:
    """Compare the analytic loss gradient of every parameter group and of
    the input against central differences.

    Inputs are resampled until every ReLU input and max-pool decision is at
    least ``margin`` away from a kink.  Dropout masks are frozen by
    restoring the layers' RNG states before every evaluation.  ``corrupt``
    adds a constant to the first coordinate of the named analytic groups
    (used as a negative control).
    """
    rng = np.random.default_rng(seed)
    saved_rng = net.rng_states()
    saved_state = {k: v.copy() for k, v in net.state_tensors().items()}
    try:
        labels = rng.integers(0, net.class_count, input_shape[0])
        for _ in range(max_resample):
            x = rng.standard_normal(input_shape)
            net.set_rng_states(saved_rng)
            if kink_margin(net, x) >= margin:
                break
        else:
            raise NumericError(f"no input with kink margin >= {margin} after {max_resample} draws")

        def loss(_=None):
            net.set_rng_states(saved_rng)
            return L.softmax_xent(net.forward(x, True), labels)[0]

        net.set_rng_states(saved_rng)
        _, _, dx = net.loss_and_grad(x, labels, training=True)
        analytic = {"input": dx}
        for p in net.named_params():
            analytic[p.name] = p.grad.copy()
        if corrupt:
            for name, delta in corrupt.items():
                analytic[name].reshape(-1)[0] += delta

        report = GradReport(tol)
        report.add("input", analytic["input"], finite_diff(loss, x, h))
        for p in net.named_params():
            report.add(p.name, analytic[p.name], finite_diff(loss, p.value, h))
        return report
    finally:
        net.set_rng_states(saved_rng)
        net.load_state_tensors(saved_state)
