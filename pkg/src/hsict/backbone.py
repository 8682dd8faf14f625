"""Stem CNN, homogeneous/structural pooling fusion and the four-stage
HSICT backbone."""

from __future__ import annotations

from dataclasses import dataclass

from . import ops
from .config import BackboneConfig, HsFuseConfig, StageConfig
from .errors import ConfigError, DimensionError
from .ict import (IctBlockParams, PatchEmbedParams, ict_block, init_ict_block, init_patch_embed,
                  patch_embed)
from .layers import BatchNorm, Conv, Scope, batchnorm, conv
from .ops import PoolConfig
from .tensor import Tensor, as_tensor


@dataclass
class StemParams:
    convs: list[Conv]
    norms: list[BatchNorm]


@dataclass
class StageParams:
    cfg: StageConfig
    embed: PatchEmbedParams
    blocks: list[IctBlockParams]
    conv: Conv
    fuse: HsFuseConfig


@dataclass
class BackboneParams:
    cfg: BackboneConfig
    stem: StemParams
    stages: list[StageParams]


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def init_stem(scope: Scope, c_in: int, dim: int) -> StemParams:
    convs = [conv(scope, "conv0", c_in, dim, 3, stride=2, pad=1),
             conv(scope, "conv1", dim, dim, 3, pad=1),
             conv(scope, "conv2", dim, dim, 3, pad=1)]
    norms = [batchnorm(scope, f"bn{i}", dim) for i in range(3)]
    return StemParams(convs, norms)


def init_stage(scope: Scope, cfg: StageConfig, c_in: int, resolution: tuple[int, int],
               fuse: HsFuseConfig, ffn_ratio: int = 4, attn_window: int | None = None,
               eq10_literal: bool = False) -> tuple[StageParams, tuple[int, int]]:
    """Build one stage; returns its params and its output resolution."""
    h, w = (_conv_out(n, 3, cfg.embed_stride, 1) for n in resolution)
    embed = init_patch_embed(scope.scope("embed"), c_in, cfg.dim, cfg.embed_stride)
    blocks = [init_ict_block(scope.scope(f"block{i}"), cfg.dim, cfg.heads, (h, w), ffn_ratio,
                             attn_window, eq10_literal) for i in range(cfg.blocks)]
    c = conv(scope, "conv", cfg.dim, cfg.dim, 3, pad=1)
    out = tuple(_conv_out(n, fuse.window, fuse.stride, fuse.pad) for n in (h, w))
    return StageParams(cfg, embed, blocks, c, fuse), out


def init_backbone(scope: Scope, cfg: BackboneConfig, image_size: int, ffn_ratio: int = 4,
                  attn_window: int | None = None, eq10_literal: bool = False) -> BackboneParams:
    stem = init_stem(scope.scope("stem"), 3, cfg.stem_dim)
    res = (_conv_out(image_size, 3, 2, 1),) * 2
    c_in = cfg.stem_dim
    stages = []
    for i, sc in enumerate(cfg.stages):
        sp, res = init_stage(scope.scope(f"stage{i + 1}"), sc, c_in, res, cfg.hs_for(sc), ffn_ratio,
                             attn_window, eq10_literal)
        if min(res) < 1:
            raise ConfigError(f"image_size {image_size} too small for the stage schedule")
        stages.append(sp)
        c_in = sc.dim
    return BackboneParams(cfg, stem, stages)


def stem_forward(x, p: StemParams, training: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"stem expects (N, 3, H, W) input, got {x.shape}")
    if x.shape[2] < 8 or x.shape[3] < 8:
        raise ConfigError(f"stem needs H, W >= 8, got {x.shape[2:]}")
    for c, bn in zip(p.convs, p.norms):
        x = ops.relu(bn(c(x), training))
    return x


def hs_fuse(x, cfg: HsFuseConfig) -> Tensor:
    """Weighted sum of the homogeneous (average) and structural (max) pools."""
    avg = ops.pool2d(x, PoolConfig(cfg.window, cfg.stride, "avg", cfg.pad))
    mx = ops.pool2d(x, PoolConfig(cfg.window, cfg.stride, "max", cfg.pad))
    return avg * cfg.gamma1 + mx * cfg.gamma2


def hsict_stage(x, p: StageParams) -> Tensor:
    x = as_tensor(x)
    if x.shape[1] != p.embed.conv.weight.shape[1]:
        raise DimensionError(f"stage channel axis: expected {p.embed.conv.weight.shape[1]}, got {x.shape[1]}")
    x = patch_embed(x, p.embed)
    for blk in p.blocks:
        x = ict_block(x, blk)
    x = ops.relu(p.conv(x))
    return hs_fuse(x, p.fuse)


def backbone_forward(x, p: BackboneParams, training: bool = False) -> tuple[Tensor, list[Tensor]]:
    x = stem_forward(x, p.stem, training)
    outputs = []
    for sp in p.stages:
        x = hsict_stage(x, sp)
        outputs.append(x)
    return x, outputs
