"""ICT transformer block: local perception unit, lightweight multi-head
self-attention over stride-2 reduced keys/values, and the inverted-residual
feed-forward network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .layers import Conv, LayerNorm, Scope, conv, layernorm
from .tensor import Param, Tensor, as_tensor, matmul, reshape, transpose

MASK_VALUE = -1e9


@dataclass
class AttentionParams:
    wq: Conv
    wk: Conv
    wv: Conv
    w0: Conv
    dw_k: Conv | None
    dw_v: Conv | None
    bias_table: Param
    bias_index: np.ndarray
    heads: int
    resolution: tuple[int, int]
    window_mask: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.wq.out_channels

    @property
    def d_k(self) -> int:
        return self.dim // self.heads

    @property
    def kv_resolution(self) -> tuple[int, int]:
        return kv_grid(*self.resolution)


@dataclass
class IrffnParams:
    expand: Conv
    dw: Conv
    project: Conv

    @property
    def ratio(self) -> int:
        return self.expand.out_channels // self.project.out_channels


@dataclass
class IctBlockParams:
    lpu: Conv
    ln1: LayerNorm
    ln2: LayerNorm
    attn: AttentionParams
    ffn: IrffnParams
    eq10_literal: bool = False


@dataclass
class PatchEmbedParams:
    conv: Conv
    norm: LayerNorm


def reduces_kv(h: int, w: int) -> bool:
    """Stride-2 key/value reduction is skipped on grids of 2x2 or smaller."""
    return h > 2 and w > 2


def kv_grid(h: int, w: int) -> tuple[int, int]:
    if reduces_kv(h, w):
        return (h + 1) // 2, (w + 1) // 2
    return h, w


def relative_bias_index(h: int, w: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Flat table index for every (query, reduced key) pair.

    A reduced key token (a, b) is centered on full-resolution position
    (s*a, s*b); the bias depends only on the row/column offset between
    that center and the query position.
    """
    s = 2 if reduces_kv(h, w) else 1
    hk, wk = kv_grid(h, w)
    qi, qj = np.divmod(np.arange(h * w), w)
    ka, kb = np.divmod(np.arange(hk * wk), wk)
    dr = qi[:, None] - s * ka[None, :] + s * (hk - 1)
    dc = qj[:, None] - s * kb[None, :] + s * (wk - 1)
    rows, cols = h + s * (hk - 1), w + s * (wk - 1)
    return (dr * cols + dc).astype(np.int64), (rows, cols)


def window_mask(h: int, w: int, window: int) -> np.ndarray:
    """Additive mask keeping each query inside its window x window tile."""
    s = 2 if reduces_kv(h, w) else 1
    hk, wk = kv_grid(h, w)
    qi, qj = np.divmod(np.arange(h * w), w)
    ka, kb = np.divmod(np.arange(hk * wk), wk)
    same = ((qi[:, None] // window) == (s * ka[None, :] // window)) & \
           ((qj[:, None] // window) == (s * kb[None, :] // window))
    return np.where(same, 0.0, MASK_VALUE)


def init_attention(scope: Scope, dim: int, heads: int, resolution: tuple[int, int],
                   attn_window: int | None = None) -> AttentionParams:
    if heads < 1 or dim % heads:
        raise ConfigError(f"model dim {dim} is not divisible by heads {heads}")
    h, w = resolution
    reduce = reduces_kv(h, w)
    index, table = relative_bias_index(h, w)
    mask = window_mask(h, w, attn_window) if attn_window else None
    return AttentionParams(
        wq=conv(scope, "wq", dim, dim, 1, gain=1.0),
        wk=conv(scope, "wk", dim, dim, 1, gain=1.0),
        wv=conv(scope, "wv", dim, dim, 1, gain=1.0),
        w0=conv(scope, "w0", dim, dim, 1, gain=1.0),
        dw_k=conv(scope, "dw_k", dim, dim, 3, stride=2, pad=1, groups=dim, bias=False, gain=1.0) if reduce else None,
        dw_v=conv(scope, "dw_v", dim, dim, 3, stride=2, pad=1, groups=dim, bias=False, gain=1.0) if reduce else None,
        bias_table=scope.zeros("B", (heads,) + table),
        bias_index=index,
        heads=heads,
        resolution=(h, w),
        window_mask=mask,
    )


def init_irffn(scope: Scope, dim: int, ratio: int = 4) -> IrffnParams:
    hidden = dim * ratio
    return IrffnParams(
        expand=conv(scope, "expand", dim, hidden, 1),
        dw=conv(scope, "dw", hidden, hidden, 3, groups=hidden, gain=1.0),
        project=conv(scope, "project", hidden, dim, 1, gain=1.0),
    )


def init_ict_block(scope: Scope, dim: int, heads: int, resolution: tuple[int, int], ratio: int = 4,
                   attn_window: int | None = None, eq10_literal: bool = False) -> IctBlockParams:
    return IctBlockParams(
        lpu=conv(scope, "lpu", dim, dim, 3, groups=dim, gain=1.0),
        ln1=layernorm(scope, "ln1", dim),
        ln2=layernorm(scope, "ln2", dim),
        attn=init_attention(scope.scope("lmhsa"), dim, heads, resolution, attn_window),
        ffn=init_irffn(scope.scope("irffn"), dim, ratio),
        eq10_literal=eq10_literal,
    )


def init_patch_embed(scope: Scope, c_in: int, c_out: int, stride: int) -> PatchEmbedParams:
    if stride not in (1, 2):
        raise ConfigError(f"patch embedding stride must be 1 or 2, got {stride}")
    return PatchEmbedParams(conv(scope, "conv", c_in, c_out, 3, stride=stride, pad=1), layernorm(scope, "norm", c_out))


# -- forward ops -----------------------------------------------------------------

def patch_embed(x, p: PatchEmbedParams) -> Tensor:
    return p.norm(p.conv(x))


def lpu(x, p: IctBlockParams) -> Tensor:
    x = as_tensor(x)
    if x.shape[1] != p.lpu.out_channels:
        raise DimensionError(f"lpu channel axis: kernel has {p.lpu.out_channels} channels, x has {x.shape[1]}")
    return p.lpu(x) + x


def _heads_first(t: Tensor, heads: int) -> Tensor:
    n, d, h, w = t.shape
    return transpose(reshape(t, (n, heads, d // heads, h * w)), (0, 1, 3, 2))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, bias: Tensor | None = None,
              mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention of full-grid queries over (reduced) keys.

    Returns the (N, d, H, W) head-concatenated output and the
    (N, heads, n_q, n_kv) attention weights.
    """
    n, d, h, w = q.shape
    dk = d // heads
    qh = _heads_first(q, heads)                     # N, h, n_q, dk
    kh = reshape(k, (n, heads, dk, -1))             # N, h, dk, n_kv
    vh = _heads_first(v, heads)                     # N, h, n_kv, dk
    logits = matmul(qh, kh, tag="qk") * float(1.0 / np.sqrt(dk))
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        logits = logits + mask.astype(logits.dtype)
    weights = ops.softmax(logits, axis=-1)
    out = matmul(weights, vh, tag="av")            # N, h, n_q, dk
    out = reshape(transpose(out, (0, 1, 3, 2)), (n, d, h, w))
    return out, weights


def lmhsa(x, p: AttentionParams, return_weights: bool = False):
    x = as_tensor(x)
    n, d, h, w = x.shape
    if d != p.dim:
        raise DimensionError(f"lmhsa channel axis: expected {p.dim}, got {d}")
    if (h, w) != p.resolution:
        raise DimensionError(f"lmhsa spatial axes: params built for {p.resolution}, got {(h, w)}")
    q, k, v = p.wq(x), p.wk(x), p.wv(x)
    if p.dw_k is not None:
        k, v = p.dw_k(k), p.dw_v(v)
    bias = ops.take(p.bias_table, p.bias_index)
    out, weights = attention(q, k, v, p.heads, bias, p.window_mask)
    out = p.w0(out)
    return (out, weights) if return_weights else out


def msa(x, p: AttentionParams, return_weights: bool = False):
    """Standard multi-head self-attention (no key/value reduction, no bias)
    using the same projections; the reference point for cost comparisons."""
    x = as_tensor(x)
    out, weights = attention(p.wq(x), p.wk(x), p.wv(x), p.heads)
    out = p.w0(out)
    return (out, weights) if return_weights else out


def irffn(x, p: IrffnParams) -> Tensor:
    z = ops.gelu(p.expand(x))
    return p.project(p.dw(z) + z)


def ict_block(x, p: IctBlockParams) -> Tensor:
    y = lpu(x, p)
    z = lmhsa(p.ln1(y), p.attn) + y
    ffn_in = p.ln2(y) if p.eq10_literal else p.ln2(z)
    return irffn(ffn_in, p.ffn) + z
