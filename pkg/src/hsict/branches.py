"""Auxiliary CNN feature extractors: the residual branch and the
spatial-exploitation branch. Both read the raw image."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from . import ops
from .errors import ConfigError, DimensionError
from .layers import BatchNorm, Conv, Scope, batchnorm, conv
from .ops import PoolConfig
from .tensor import Param, Tensor, as_tensor

log = logging.getLogger(__name__)


@dataclass
class ResidualBlockParams:
    conv1: Conv
    norm: BatchNorm
    conv2: Conv
    pwc: Conv | None = None
    shortcut: Conv | None = None


@dataclass
class ResidualBranchParams:
    entry: Conv
    entry_norm: BatchNorm
    blocks: list[ResidualBlockParams]


@dataclass
class SpatialBlockParams:
    conv: Conv
    bn: BatchNorm
    pool: PoolConfig = PoolConfig(2, 2, "max")


@dataclass
class SpatialBranchParams:
    blocks: list[SpatialBlockParams]


def init_residual_block(scope: Scope, c_in: int, c_out: int, stride: int = 1, pwc: bool = False) -> ResidualBlockParams:
    """``pwc`` selects the M variant (1x1 point-wise projection in front of conv1)."""
    proj = conv(scope, "pwc", c_in, c_out, 1) if pwc else None
    mid_in = c_out if pwc else c_in
    return ResidualBlockParams(
        conv1=conv(scope, "conv1", mid_in, c_out, 3, stride=stride, pad=1),
        norm=batchnorm(scope, "bn1", c_out),
        conv2=conv(scope, "conv2", c_out, c_out, 3, pad=1, gain=1.0),
        pwc=proj,
        shortcut=conv(scope, "shortcut", c_in, c_out, 1, stride=stride, gain=1.0)
        if (c_in != c_out or stride > 1) else None,
    )


def init_residual_branch(scope: Scope, widths=(64, 128, 192, 256)) -> ResidualBranchParams:
    entry = conv(scope, "entry", 3, widths[0], 3, stride=2, pad=1)
    entry_norm = batchnorm(scope, "entry_bn", widths[0])
    blocks = []
    c_in = widths[0]
    for i, c_out in enumerate(widths):
        blocks.append(init_residual_block(scope.scope(f"block{i}"), c_in, c_out, stride=2, pwc=(i % 2 == 0)))
        c_in = c_out
    return ResidualBranchParams(entry, entry_norm, blocks)


def init_spatial_branch(scope: Scope, widths=(32, 64, 96, 128, 160), avg_blocks=(3,)) -> SpatialBranchParams:
    blocks = []
    c_in = 3
    for i, c_out in enumerate(widths):
        mode = "avg" if i in avg_blocks else "max"
        blocks.append(SpatialBlockParams(conv(scope.scope(f"block{i}"), "conv", c_in, c_out, 3, pad=1),
                                         batchnorm(scope.scope(f"block{i}"), "bn", c_out),
                                         PoolConfig(2, 2, mode)))
        c_in = c_out
    return SpatialBranchParams(blocks)


def residual_block(x, p: ResidualBlockParams, training: bool = False) -> Tensor:
    x = as_tensor(x)
    h = p.pwc(x) if p.pwc is not None else x
    t = p.conv2(ops.relu(p.norm(p.conv1(h), training)))
    if p.shortcut is not None:
        sc = p.shortcut(x)
    else:
        if x.shape != t.shape:
            raise ConfigError(f"residual block changes shape {x.shape} -> {t.shape} but has no shortcut projection")
        sc = x
    return ops.relu(t + sc)


def residual_branch(x, p: ResidualBranchParams, training: bool = False) -> Tensor:
    x = ops.relu(p.entry_norm(p.entry(x), training))
    for blk in p.blocks:
        x = residual_block(x, blk, training)
    return x


def spatial_block(x, p: SpatialBlockParams, pool: PoolConfig | None = None, training: bool = False) -> Tensor:
    y = ops.relu(p.bn(p.conv(x), training))
    return ops.pool2d(y, pool or p.pool)


def spatial_branch(x, p: SpatialBranchParams, training: bool = False) -> Tensor:
    for blk in p.blocks:
        x = spatial_block(x, blk, training=training)
    return x


@dataclass
class ImportResult:
    matched: list[str] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)


def import_pretrained(path: str | Path, name_map: Mapping[str, str], params: Mapping[str, Param]) -> ImportResult:
    """Overwrite ``params`` from a checkpoint file.

    ``name_map`` maps checkpoint name prefixes to model name prefixes; a
    checkpoint tensor is imported when its renamed path names a model
    parameter. Matched tensors must agree in shape.
    """
    from .checkpoint import read_checkpoint

    ckpt = read_checkpoint(path)
    result = ImportResult()
    for src_name, arr in ckpt.tensors.items():
        target = None
        for src_prefix, dst_prefix in name_map.items():
            if src_name.startswith(src_prefix):
                target = dst_prefix + src_name[len(src_prefix):]
                break
        if target is None or target not in params:
            result.unmatched.append(src_name)
            continue
        p = params[target]
        if p.shape != arr.shape:
            raise DimensionError(f"pretrained tensor {src_name!r} has shape {arr.shape}, "
                                 f"model param {target!r} expects {p.shape}")
        p.data[...] = arr
        result.matched.append(target)
    log.warning("import_pretrained: matched %d tensors, %d unmatched", len(result.matched), len(result.unmatched))
    return result
