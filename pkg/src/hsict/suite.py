"""Registry of finite-difference gradient cases for every op and block.

Each case builder takes a seed and returns ``(fn, params, x)`` in float64,
ready for :func:`hsict.gradcheck.grad_check`. Single ops default to a
tolerance of 1e-4 and composite blocks to 1e-3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import ops
from .backbone import hs_fuse, hsict_stage, init_stage, init_stem, stem_forward
from .branches import init_residual_block, init_spatial_branch, residual_block, spatial_block
from .config import HsFuseConfig, ModelConfig, StageConfig
from .gradcheck import GradCheckReport, grad_check
from .head import cfa_refine, init_cfa, init_spatial_attention, spatial_attention
from .ict import init_attention, init_ict_block, init_irffn, ict_block, irffn, lmhsa, msa
from .layers import ParamStore
from .ops import PoolConfig
from .tensor import Param, matmul, reshape, transpose

F64 = np.float64
OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class Case:
    name: str
    kind: str            # "op" or "composite"
    build: Callable[[int], tuple]
    tol: float
    max_per_param: int | None = None


REGISTRY: dict[str, Case] = {}


def register(name: str, kind: str = "op", tol: float | None = None, max_per_param: int | None = None):
    def deco(build):
        REGISTRY[name] = Case(name, kind, build, tol if tol is not None else
                              (OP_TOL if kind == "op" else COMPOSITE_TOL), max_per_param)
        return build
    return deco


def select(names: Iterable[str]) -> list[Case]:
    """Resolve selectors: ``all``, ``ops``, ``composites``, a case name, or
    a family prefix (``conv2d`` picks every ``conv2d_*`` case)."""
    out: dict[str, Case] = {}
    for sel in names:
        if sel == "all":
            hits = list(REGISTRY.values())
        elif sel in ("ops", "composites"):
            hits = [c for c in REGISTRY.values() if c.kind == sel[:-1]]
        else:
            hits = [c for n, c in REGISTRY.items() if n == sel or n.startswith(sel + "_")]
        if not hits:
            raise KeyError(f"no gradient case matches {sel!r}")
        for c in hits:
            out.setdefault(c.name, c)
    return list(out.values())


def run_case(case: Case, seed: int, tol: float | None = None) -> GradCheckReport:
    fn, params, x = case.build(seed)
    return grad_check(fn, params, x, tol=case.tol if tol is None else tol,
                      max_per_param=case.max_per_param, seed=seed)


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7919])


def _randn(rng, *shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _param(name, arr) -> Param:
    return Param(name, np.asarray(arr, dtype=F64))


def _store(seed: int) -> ParamStore:
    return ParamStore(seed, F64)


def _with_bias(p: ParamStore, scale: float = 0.1) -> ParamStore:
    """Give zero-initialized params (biases, norm shifts) small random values."""
    rng = np.random.default_rng(p.rng.integers(1 << 31))
    for prm in p.params.values():
        prm.data = prm.data + scale * rng.standard_normal(prm.shape)
    return p


# -- single ops ---------------------------------------------------------------------------

@register("add")
def _add(seed):
    rng = _rng(seed)
    b = _param("b", _randn(rng, 1, 3, 1, 4))
    return (lambda x: x + b), [b], _randn(rng, 2, 3, 5, 4)


@register("mul")
def _mul(seed):
    rng = _rng(seed)
    b = _param("b", _randn(rng, 3, 1, 4))
    return (lambda x: x * b), [b], _randn(rng, 2, 3, 5, 4)


@register("matmul")
def _matmul(seed):
    rng = _rng(seed)
    b = _param("b", _randn(rng, 2, 5, 3))
    return (lambda x: matmul(x, b)), [b], _randn(rng, 2, 4, 5)


@register("reshape_transpose")
def _reshape(seed):
    rng = _rng(seed)
    return (lambda x: transpose(reshape(x, (2, 6, 5)), (0, 2, 1)) * 1.0), [], _randn(rng, 2, 3, 2, 5)


def _conv_case(seed, c_in, c_out, k, stride, pad, groups, h=7, w=6):
    rng = _rng(seed)
    wt = _param("weight", _randn(rng, c_out, c_in // groups, k, k) * 0.5)
    b = _param("bias", _randn(rng, c_out))
    return (lambda x: ops.conv2d(x, wt, b, stride, pad, groups)), [wt, b], _randn(rng, 2, c_in, h, w)


register("conv2d_plain")(lambda s: _conv_case(s, 3, 4, 3, 1, 1, 1))
register("conv2d_strided")(lambda s: _conv_case(s, 2, 3, 3, 2, 1, 1))
register("conv2d_pointwise")(lambda s: _conv_case(s, 4, 3, 1, 1, 0, 1))
register("conv2d_grouped")(lambda s: _conv_case(s, 4, 6, 3, 1, 1, 2))
register("conv2d_depthwise")(lambda s: _conv_case(s, 4, 4, 3, 1, 1, 4))
register("conv2d_depthwise_strided")(lambda s: _conv_case(s, 3, 3, 3, 2, 1, 3))


def _pool_case(seed, cfg: PoolConfig):
    rng = _rng(seed)
    return (lambda x: ops.pool2d(x, cfg)), [], _randn(rng, 2, 3, 6, 7)


register("pool2d_max")(lambda s: _pool_case(s, PoolConfig(2, 2, "max")))
register("pool2d_max_padded")(lambda s: _pool_case(s, PoolConfig(3, 1, "max", 1)))
register("pool2d_avg")(lambda s: _pool_case(s, PoolConfig(2, 2, "avg")))
register("pool2d_avg_padded")(lambda s: _pool_case(s, PoolConfig(3, 1, "avg", 1)))


@register("global_avg_pool")
def _gap(seed):
    return ops.global_avg_pool, [], _randn(_rng(seed), 2, 3, 4, 5)


@register("adaptive_avg_pool")
def _aap(seed):
    return (lambda x: ops.adaptive_avg_pool(x, (2, 3))), [], _randn(_rng(seed), 2, 3, 5, 7)


register("channel_pool_avg")(lambda s: ((lambda x: ops.channel_pool(x, "avg")), [], _randn(_rng(s), 2, 4, 3, 3)))
register("channel_pool_max")(lambda s: ((lambda x: ops.channel_pool(x, "max")), [], _randn(_rng(s), 2, 4, 3, 3)))


def _norm_case(seed, mode, training):
    rng = _rng(seed)
    g = _param("gamma", 1.0 + 0.2 * _randn(rng, 3))
    b = _param("beta", 0.2 * _randn(rng, 3))
    stats = ops.RunningStats(0.1 * _randn(rng, 3), 1.0 + rng.random(3))
    return (lambda x: ops.normalize(x, mode, g, b, 1e-5, stats, training)), [g, b], _randn(rng, 3, 3, 4, 4)


register("normalize_batch_train")(lambda s: _norm_case(s, "batch", True))
register("normalize_batch_eval")(lambda s: _norm_case(s, "batch", False))
register("normalize_layer")(lambda s: _norm_case(s, "layer", False))

register("relu")(lambda s: (ops.relu, [], _randn(_rng(s), 2, 3, 4, 4)))
register("sigmoid")(lambda s: (ops.sigmoid, [], 2 * _randn(_rng(s), 2, 3, 4, 4)))
register("gelu")(lambda s: (ops.gelu, [], 2 * _randn(_rng(s), 2, 3, 4, 4)))
register("softmax")(lambda s: ((lambda x: ops.softmax(x, -1)), [], 2 * _randn(_rng(s), 2, 3, 6)))


@register("concat_channels")
def _concat(seed):
    rng = _rng(seed)
    other = _param("other", _randn(rng, 2, 2, 3, 3))
    return (lambda x: ops.concat_channels([x, other, x])), [other], _randn(rng, 2, 3, 3, 3)


register("channel_slice")(lambda s: ((lambda x: ops.channel_slice(x, 1, 3)), [], _randn(_rng(s), 2, 4, 3, 3)))


@register("dropout")
def _dropout(seed):
    # a fresh generator per call keeps the mask fixed across perturbations
    return ((lambda x: ops.dropout(x, 0.3, np.random.default_rng(seed), True)), [],
            _randn(_rng(seed), 4, 6))


@register("linear")
def _linear(seed):
    rng = _rng(seed)
    w = _param("weight", _randn(rng, 4, 6))
    b = _param("bias", _randn(rng, 4))
    return (lambda x: ops.linear(x, w, b)), [w, b], _randn(rng, 3, 6)


@register("take")
def _take(seed):
    rng = _rng(seed)
    index = rng.integers(0, 12, size=(5, 4))
    return (lambda x: ops.take(x, index)), [], _randn(rng, 2, 3, 4)


# -- composite blocks -----------------------------------------------------------------------

@register("lmhsa", kind="composite")
def _lmhsa(seed):
    st = _store(seed)
    p = init_attention(st.scope("attn"), 8, 2, (5, 6))
    _with_bias(st)
    return (lambda x: lmhsa(x, p)), st.params, _randn(_rng(seed), 2, 8, 5, 6)


@register("lmhsa_windowed", kind="composite")
def _lmhsa_win(seed):
    st = _store(seed)
    p = init_attention(st.scope("attn"), 8, 2, (4, 4), attn_window=2)
    _with_bias(st)
    return (lambda x: lmhsa(x, p)), st.params, _randn(_rng(seed), 2, 8, 4, 4)


@register("msa", kind="composite")
def _msa(seed):
    st = _store(seed)
    p = init_attention(st.scope("attn"), 8, 2, (3, 4))
    return (lambda x: msa(x, p)), st.params, _randn(_rng(seed), 2, 8, 3, 4)


@register("irffn", kind="composite")
def _irffn(seed):
    st = _store(seed)
    p = init_irffn(st.scope("ffn"), 4, 4)
    _with_bias(st)
    return (lambda x: irffn(x, p)), st.params, _randn(_rng(seed), 2, 4, 4, 5)


@register("ict_block", kind="composite")
def _ict(seed):
    st = _store(seed)
    p = init_ict_block(st.scope("blk"), 8, 2, (4, 5), ratio=2)
    _with_bias(st)
    return (lambda x: ict_block(x, p)), st.params, _randn(_rng(seed), 2, 8, 4, 5)


@register("hs_fuse", kind="composite")
def _hs(seed):
    cfg = HsFuseConfig(0.3, 0.7)
    return (lambda x: hs_fuse(x, cfg)), [], _randn(_rng(seed), 2, 3, 6, 6)


@register("stem", kind="composite")
def _stem(seed):
    st = _store(seed)
    p = init_stem(st.scope("stem"), 3, 4)
    _with_bias(st)
    return (lambda x: stem_forward(x, p, training=True)), st.params, _randn(_rng(seed), 2, 3, 8, 8)


@register("hsict_stage", kind="composite")
def _stage(seed):
    st = _store(seed)
    cfg = StageConfig(8, 1, 2, embed_stride=1, fuse_stride=2)
    p, _ = init_stage(st.scope("stage"), cfg, 4, (6, 6), HsFuseConfig(window=2, stride=2), ffn_ratio=2)
    _with_bias(st)
    return (lambda x: hsict_stage(x, p)), st.params, _randn(_rng(seed), 2, 4, 6, 6)


@register("residual_block", kind="composite")
def _res(seed):
    st = _store(seed)
    p = init_residual_block(st.scope("blk"), 3, 4, stride=2, pwc=True)
    _with_bias(st)
    return (lambda x: residual_block(x, p, training=True)), st.params, _randn(_rng(seed), 2, 3, 6, 6)


@register("residual_block_identity", kind="composite")
def _res_id(seed):
    st = _store(seed)
    p = init_residual_block(st.scope("blk"), 4, 4, stride=1, pwc=False)
    _with_bias(st)
    return (lambda x: residual_block(x, p, training=True)), st.params, _randn(_rng(seed), 2, 4, 5, 5)


@register("spatial_block", kind="composite")
def _spat(seed):
    st = _store(seed)
    branch = init_spatial_branch(st.scope("sp"), (4, 4, 4, 4, 4), avg_blocks=(1,))
    # block0 max-pools, block1 average-pools
    blocks = branch.blocks[:2]
    _with_bias(st)
    used = {k: v for k, v in st.params.items() if k.startswith(("sp.block0", "sp.block1"))}

    def fn(x):
        return spatial_block(spatial_block(x, blocks[0], training=True), blocks[1], training=True)

    return fn, used, _randn(_rng(seed), 2, 3, 8, 8)


@register("cfa", kind="composite")
def _cfa(seed):
    st = _store(seed)
    p = init_cfa(st.scope("cfa"), 6, 3)
    _with_bias(st)
    return (lambda x: cfa_refine(x, p)), st.params, _randn(_rng(seed), 2, 6, 3, 3)


@register("spatial_attention", kind="composite")
def _sa(seed):
    st = _store(seed)
    p = init_spatial_attention(st.scope("sa"), 7)
    _with_bias(st)
    return (lambda x: spatial_attention(x, p)), st.params, _randn(_rng(seed), 2, 4, 5, 5)


@register("micro_model", kind="composite", max_per_param=2)
def _micro(seed):
    # imported lazily: model.py pulls in every module
    from .model import HsictModel

    cfg = ModelConfig.micro(8, 32)
    m = HsictModel(cfg, seed=seed, dtype=F64, dropout=0.0)
    _with_bias(m.store, 0.05)
    return m.logits_fn(training=False), m.params, _randn(_rng(seed), 1, 3, 32, 32)
