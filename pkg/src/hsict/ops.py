"""Differentiable layer primitives on NCHW tensors.

Convolution is cross-correlation (no kernel flip) with zero padding.
Every function takes :class:`Tensor` or :class:`Param` arguments and
returns a :class:`Tensor` wired into the autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .errors import ConfigError, DimensionError
from .tensor import Tensor, add_flops, as_tensor, make_result, matmul, transpose

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _check_nchw(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects an NCHW tensor, got rank {x.ndim}")


# -- convolution -------------------------------------------------------------

def conv2d(x, kernel, bias=None, stride=1, pad=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and channel groups.

    ``kernel`` has shape (C_out, C_in // groups, kh, kw); ``stride`` and
    ``pad`` may be ints or (row, col) pairs.
    """
    x = as_tensor(x)
    w = as_tensor(kernel)
    b = as_tensor(bias) if bias is not None else None
    _check_nchw(x, "conv2d")
    if w.ndim != 4:
        raise DimensionError(f"conv2d kernel must be rank 4, got rank {w.ndim}")
    N, C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    if groups < 1 or C % groups or Co % groups:
        raise ConfigError(f"groups={groups} must divide input channels {C} and output channels {Co}")
    if Cg != C // groups:
        raise DimensionError(f"conv2d channel axis mismatch: kernel expects {Cg * groups} input channels, x has {C}")
    if b is not None and b.shape != (Co,):
        raise DimensionError(f"conv2d bias must have shape ({Co},), got {b.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if ph < 0 or pw < 0:
        raise ConfigError("pad must be non-negative")
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1:
        raise DimensionError(f"conv2d height axis: kernel {kh} exceeds padded input {H + 2 * ph}")
    if Wo < 1:
        raise DimensionError(f"conv2d width axis: kernel {kw} exceeds padded input {W + 2 * pw}")

    # kernels work channels-last so the GEMM is tall (N*Ho*Wo rows) and the
    # depthwise taps broadcast over a contiguous channel axis
    Hp, Wp = H + 2 * ph, W + 2 * pw
    xp = np.zeros((N, Hp, Wp, C), dtype=x.dtype)
    xp[:, ph:ph + H, pw:pw + W] = x.data.transpose(0, 2, 3, 1)
    rows = [slice(i, i + sh * (Ho - 1) + 1, sh) for i in range(kh)]
    cols_ = [slice(j, j + sw * (Wo - 1) + 1, sw) for j in range(kw)]
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    add_flops("conv", 2 * N * Co * Ho * Wo * Cg * kh * kw)
    M = N * Ho * Wo

    depthwise = groups == C and Cg == 1 and Co == C
    if depthwise:
        wt = np.ascontiguousarray(w.data[:, 0].transpose(1, 2, 0))      # kh, kw, C
        out = xp[:, rows[0], cols_[0]] * wt[0, 0]
        tmp = np.empty_like(out)
        for i, j in taps[1:]:
            np.multiply(xp[:, rows[i], cols_[j]], wt[i, j], out=tmp)
            out += tmp
    else:
        G, Og = groups, Co // groups
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]  # N, Ho, Wo, C, kh, kw
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))         # N, Ho, Wo, kh, kw, C
        if G == 1:
            cms = [cols.reshape(M, -1)]
        else:
            cms = [cols[..., g * Cg:(g + 1) * Cg].reshape(M, -1) for g in range(G)]
        # per group: (Og, kh*kw*Cg) with the channel index fastest
        wms = [w.data[g * Og:(g + 1) * Og].transpose(0, 2, 3, 1).reshape(Og, -1) for g in range(G)]
        out = cms[0] @ wms[0].T if G == 1 else np.concatenate([c @ m.T for c, m in zip(cms, wms)], axis=1)
        out = out.reshape(N, Ho, Wo, Co)
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))             # N, Ho, Wo, Co
        gxp = np.zeros_like(xp) if x.requires_grad else None
        if depthwise:
            if w.requires_grad:
                gw = np.empty((C, 1, kh, kw), dtype=w.dtype)
                for i, j in taps:
                    gw[:, 0, i, j] = np.einsum("nhwc,nhwc->c", gt, xp[:, rows[i], cols_[j]])
                w._accum(gw)
            if gxp is not None:
                tmp = np.empty_like(gt)
                for i, j in taps:
                    np.multiply(gt, wt[i, j], out=tmp)
                    gxp[:, rows[i], cols_[j]] += tmp
        else:
            gm = gt.reshape(M, Co)
            gw = np.empty(w.shape, dtype=w.dtype) if w.requires_grad else None
            for grp in range(G):
                gg = gm[:, grp * Og:(grp + 1) * Og]
                if gw is not None:
                    gw[grp * Og:(grp + 1) * Og] = (gg.T @ cms[grp]).reshape(Og, kh, kw, Cg).transpose(0, 3, 1, 2)
                if gxp is not None:
                    per_tap = np.matmul(gg, wms[grp].reshape(Og, kh * kw, Cg).transpose(1, 0, 2))
                    ch = slice(grp * Cg, (grp + 1) * Cg)
                    for t, (i, j) in enumerate(taps):
                        gxp[:, rows[i], cols_[j], ch] += per_tap[t].reshape(N, Ho, Wo, Cg)
            if gw is not None:
                w._accum(gw)
        if gxp is not None:
            x._accum(gxp[:, ph:ph + H, pw:pw + W].transpose(0, 3, 1, 2))

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)


# -- pooling -------------------------------------------------------------------

@dataclass(frozen=True)
class PoolConfig:
    window: int
    stride: int
    mode: str = "max"
    pad: int = 0

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ConfigError("pool window and stride must be >= 1")
        if self.mode not in ("max", "avg"):
            raise ConfigError(f"unknown pool mode {self.mode!r}")
        if not 0 <= self.pad <= self.window // 2:
            raise ConfigError("pool pad must lie in [0, window // 2]")


def pool2d(x, cfg: PoolConfig) -> Tensor:
    """Sliding-window max or mean.

    Padded positions never contribute: max pads with -inf and the mean
    divides by the count of real elements under the window (w*w in the
    interior). Padding is limited to window // 2.
    """
    x = as_tensor(x)
    _check_nchw(x, "pool2d")
    N, C, H, W = x.shape
    w, s, p = cfg.window, cfg.stride, cfg.pad
    if w > H + 2 * p:
        raise DimensionError(f"pool2d height axis: window {w} larger than input {H}")
    if w > W + 2 * p:
        raise DimensionError(f"pool2d width axis: window {w} larger than input {W}")
    Ho = (H + 2 * p - w) // s + 1
    Wo = (W + 2 * p - w) // s + 1
    fill = -np.inf if cfg.mode == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill) if p else x.data
    rows = [slice(i, i + s * (Ho - 1) + 1, s) for i in range(w)]
    cols = [slice(j, j + s * (Wo - 1) + 1, s) for j in range(w)]

    if cfg.mode == "max":
        out = np.full((N, C, Ho, Wo), -np.inf, dtype=x.dtype)
        arg = np.zeros((N, C, Ho, Wo), dtype=np.int32)
        for i in range(w):
            for j in range(w):
                win = xp[:, :, rows[i], cols[j]]
                better = win > out
                out = np.where(better, win, out)
                arg[better] = i * w + j

        def backward(g):
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(w):
                for j in range(w):
                    gxp[:, :, rows[i], cols[j]] += np.where(arg == i * w + j, g, 0.0)
            x._accum(gxp[:, :, p:p + H, p:p + W])

        return make_result(out, (x,), backward)

    if p:
        ones = np.pad(np.ones((H, W), dtype=x.dtype), p)
        count = np.zeros((Ho, Wo), dtype=x.dtype)
        for i in range(w):
            for j in range(w):
                count += ones[rows[i], cols[j]]
    else:
        count = np.asarray(w * w, dtype=x.dtype)
    # accumulate offsets from the window centre (always a real element), so a
    # constant window averages to exactly that constant
    ref = xp[:, :, rows[w // 2], cols[w // 2]]
    total = np.zeros((N, C, Ho, Wo), dtype=x.dtype)
    for i in range(w):
        for j in range(w):
            d = xp[:, :, rows[i], cols[j]] - ref
            total += d * ones[rows[i], cols[j]] if p else d
    out = ref + total / count

    def backward(g):
        gs = g / count
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(w):
            for j in range(w):
                gxp[:, :, rows[i], cols[j]] += gs
        x._accum(gxp[:, :, p:p + H, p:p + W])

    return make_result(out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    _check_nchw(x, "global_avg_pool")
    hw = x.shape[2] * x.shape[3]
    shape = x.shape

    def backward(g):
        x._accum(np.broadcast_to(g / hw, shape))

    return make_result(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward)


def _adaptive_bins(n_in: int, n_out: int) -> list[tuple[int, int]]:
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def adaptive_avg_pool(x, size: tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    _check_nchw(x, "adaptive_avg_pool")
    N, C, H, W = x.shape
    ho, wo = size
    if (ho, wo) == (H, W):
        return x
    if ho > H or wo > W:
        raise DimensionError(f"adaptive_avg_pool cannot upsample {H}x{W} to {ho}x{wo}")
    rb, cb = _adaptive_bins(H, ho), _adaptive_bins(W, wo)
    out = np.empty((N, C, ho, wo), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                gx[:, :, r0:r1, c0:c1] += g[:, :, i, j, None, None] / ((r1 - r0) * (c1 - c0))
        x._accum(gx)

    return make_result(out, (x,), backward)


def channel_pool(x, mode: str) -> Tensor:
    """Reduce over the channel axis to an (N, 1, H, W) map."""
    x = as_tensor(x)
    _check_nchw(x, "channel_pool")
    C = x.shape[1]
    if mode == "avg":
        def backward(g):
            x._accum(np.broadcast_to(g / C, x.shape))

        return make_result(x.data.mean(axis=1, keepdims=True), (x,), backward)
    if mode == "max":
        arg = x.data.argmax(axis=1)[:, None]
        out = np.take_along_axis(x.data, arg, axis=1)

        def backward(g):
            gx = np.zeros(x.shape, dtype=x.dtype)
            np.put_along_axis(gx, arg, g, axis=1)
            x._accum(gx)

        return make_result(out, (x,), backward)
    raise ConfigError(f"unknown channel pool mode {mode!r}")


# -- normalization -------------------------------------------------------------

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def normalize(x, mode: str, gamma, beta, eps: float = 1e-5,
              running_stats: RunningStats | None = None, training: bool = False) -> Tensor:
    """Batch norm (per channel over N,H,W) or layer norm (per token over C).

    Batch mode uses mini-batch statistics when ``training`` is set or no
    running statistics exist, otherwise the running estimates.
    """
    x = as_tensor(x)
    g_ = as_tensor(gamma)
    b_ = as_tensor(beta)
    _check_nchw(x, "normalize")
    if eps <= 0:
        raise ConfigError("eps must be > 0")
    N, C, H, W = x.shape
    if g_.shape != (C,) or b_.shape != (C,):
        raise DimensionError(f"normalize channel axis: affine params {g_.shape} do not match {C} channels")
    gb = g_.data[None, :, None, None]
    bb = b_.data[None, :, None, None]

    if mode == "layer":
        axes = (1,)
    elif mode == "batch":
        axes = (0, 2, 3)
        if not training and running_stats is not None:
            inv = 1.0 / np.sqrt(running_stats.var + eps)
            xhat = (x.data - running_stats.mean[None, :, None, None]) * inv[None, :, None, None]
            out = xhat * gb + bb

            def backward_eval(g):
                if x.requires_grad:
                    x._accum(g * gb * inv[None, :, None, None])
                if g_.requires_grad:
                    g_._accum((g * xhat).sum(axis=(0, 2, 3)))
                if b_.requires_grad:
                    b_._accum(g.sum(axis=(0, 2, 3)))

            return make_result(out.astype(x.dtype, copy=False), (x, g_, b_), backward_eval)
        if training and N == 1:
            raise DimensionError("batch normalization in training mode needs a batch axis N >= 2")
    else:
        raise ConfigError(f"unknown normalization mode {mode!r}")

    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gb + bb
    m = x.data.size // (C if mode == "batch" else N * H * W)

    if mode == "batch" and training and running_stats is not None:
        mom = running_stats.momentum
        unbiased = var.reshape(C) * (m / max(m - 1, 1))
        running_stats.mean[:] = (1 - mom) * running_stats.mean + mom * mu.reshape(C)
        running_stats.var[:] = (1 - mom) * running_stats.var + mom * unbiased

    def backward(g):
        if g_.requires_grad:
            g_._accum((g * xhat).sum(axis=(0, 2, 3)))
        if b_.requires_grad:
            b_._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gb
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            x._accum(inv * (dxhat - s1 / m - xhat * s2 / m))

    return make_result(out, (x, g_, b_), backward)


# -- activations -----------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x._accum(g * mask)

    return make_result(x.data * mask, (x,), backward)


def sigmoid(x, strict: bool = False) -> Tensor:
    """Logistic function. ``strict`` keeps saturated outputs inside the open
    interval (0, 1) by clamping to the nearest representable interior values."""
    x = as_tensor(x)
    y = expit(x.data)
    if strict:
        fi = np.finfo(y.dtype)
        y = np.clip(y, fi.tiny, 1.0 - fi.epsneg)

    def backward(g):
        x._accum(g * y * (1.0 - y))

    return make_result(y, (x,), backward)


def gelu(x) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)

    def backward(g):
        x._accum(g * (cdf + x.data * pdf))

    return make_result(x.data * cdf, (x,), backward)


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def activation(x, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None


def softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    y = softmax_np(x.data, axis)

    def backward(g):
        x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return make_result(y, (x,), backward)


# -- structural ------------------------------------------------------------------

def concat_channels(xs) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise DimensionError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for t in xs[1:]:
        for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
            if t.shape[axis] != ref[axis]:
                raise DimensionError(f"concat_channels {name} axis mismatch: {t.shape[axis]} vs {ref[axis]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accum(g[:, lo:hi])

    return make_result(np.concatenate([t.data for t in xs], axis=1), xs, backward)


def channel_slice(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[:, start:stop] = g
        x._accum(gx)

    return make_result(x.data[:, start:stop].copy(), (x,), backward)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def backward(g):
        x._accum(g * keep)

    return make_result(x.data * keep, (x,), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Rows of ``x`` (N, C_in) times ``weight`` (C_out, C_in) transposed."""
    out = matmul(x, transpose(as_tensor(weight), (1, 0)), tag="linear")
    return out if bias is None else out + as_tensor(bias)


def take(table, index: np.ndarray) -> Tensor:
    """Gather ``table[:, index]`` over a flattened trailing layout.

    ``table`` is (L, *) and is flattened to (L, M); ``index`` holds flat
    positions into M. The result has shape (L,) + index.shape.
    """
    t = as_tensor(table)
    lead = t.shape[0]
    flat = t.data.reshape(lead, -1)
    size = flat.shape[1]
    idx = np.asarray(index).ravel()

    def backward(g):
        g2 = g.reshape(lead, -1)
        gt = np.stack([np.bincount(idx, weights=g2[h], minlength=size) for h in range(lead)])
        t._accum(gt.astype(t.dtype).reshape(t.shape))

    return make_result(flat[:, idx].reshape((lead,) + np.shape(index)), (t,), backward)
