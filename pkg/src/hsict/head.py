"""Channel fusion-and-attention refinement, channel augmentation, spatial
attention and the softmax classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .layers import Conv, Linear, Scope, conv, linear
from .tensor import Param, Tensor, as_tensor, reshape


@dataclass
class CfaParams:
    conv1d: Param
    fc: Linear

    @property
    def channels(self) -> int:
        return self.fc.weight.shape[0]


@dataclass
class SpatialAttentionParams:
    conv: Conv


@dataclass
class HeadParams:
    fc: Linear
    dropout: float = 0.3


def init_cfa(scope: Scope, channels: int, kernel: int = 3) -> CfaParams:
    w = scope.normal("conv1d.weight", (1, 1, 1, kernel), np.sqrt(1.0 / kernel))
    return CfaParams(w, linear(scope, "fc", channels, channels))


def init_spatial_attention(scope: Scope, kernel: int = 7) -> SpatialAttentionParams:
    return SpatialAttentionParams(conv(scope, "conv", 2, 1, kernel, pad=kernel // 2, gain=1.0))


def init_head(scope: Scope, channels: int, classes: int = 5, dropout: float = 0.3) -> HeadParams:
    return HeadParams(linear(scope, "fc", channels, classes), dropout)


def cfa_weights(c, p: CfaParams) -> Tensor:
    """Per-channel gate a in (0, 1), shape (N, C)."""
    c = as_tensor(c)
    n, ch = c.shape[:2]
    if ch != p.channels:
        raise ConfigError(f"cfa params built for {p.channels} channels, map has {ch}")
    s = reshape(ops.global_avg_pool(c), (n, 1, 1, ch))
    k = p.conv1d.shape[-1]
    s = ops.conv2d(s, p.conv1d, None, stride=1, pad=(0, k // 2))
    return ops.sigmoid(p.fc(reshape(s, (n, ch))), strict=True)


def cfa_refine(c, p: CfaParams) -> Tensor:
    c = as_tensor(c)
    a = reshape(cfa_weights(c, p), c.shape[:2] + (1, 1))
    return c + c * a


def channel_augment(backbone, res_refined, spat_refined) -> Tensor:
    """Concatenate [residual, spatial, backbone] channels on the backbone grid."""
    backbone = as_tensor(backbone)
    hw = backbone.shape[2:]
    aux = []
    for t in (res_refined, spat_refined):
        t = as_tensor(t)
        if t.shape[2:] != hw:
            t = ops.adaptive_avg_pool(t, hw)
        aux.append(t)
    return ops.concat_channels(aux + [backbone])


def spatial_attention_map(x, p: SpatialAttentionParams) -> Tensor:
    pooled = ops.concat_channels([ops.channel_pool(x, "avg"), ops.channel_pool(x, "max")])
    return ops.sigmoid(p.conv(pooled), strict=True)


def spatial_attention(x, p: SpatialAttentionParams) -> Tensor:
    x = as_tensor(x)
    return x * spatial_attention_map(x, p)


def pooled_features(x) -> Tensor:
    x = as_tensor(x)
    return reshape(ops.global_avg_pool(x), x.shape[:2])


def head_logits(x, p: HeadParams, training: bool = False, rng: np.random.Generator | None = None):
    """Returns (penultimate pooled features, logits)."""
    feats = pooled_features(x)
    if feats.shape[1] != p.fc.weight.shape[1]:
        raise DimensionError(f"classifier expects {p.fc.weight.shape[1]} channels, got {feats.shape[1]}")
    return feats, p.fc(ops.dropout(feats, p.dropout, rng, training))


def classify(x, p: HeadParams, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    _, logits = head_logits(x, p, training, rng)
    return ops.softmax(logits, axis=-1)
