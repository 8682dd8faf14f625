"""Parameter registry and thin layer wrappers over :mod:`hsict.ops`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError
from .ops import RunningStats
from .tensor import Param, Tensor


class ParamStore:
    """Owns every named Param and batch-norm buffer of a model.

    Names are dotted paths; :meth:`scope` returns a view that prefixes
    them. Initialization draws from one seeded generator in creation
    order, so a given config and seed always produce the same weights.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, RunningStats] = {}

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def add(self, name: str, data: np.ndarray) -> Param:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Param(name, np.asarray(data, dtype=self.dtype))
        self.params[name] = p
        return p

    def add_stats(self, name: str, channels: int) -> RunningStats:
        if name in self.buffers:
            raise ConfigError(f"duplicate buffer name {name!r}")
        stats = RunningStats.fresh(channels, self.dtype)
        self.buffers[name] = stats
        return stats

    def normal(self, name: str, shape, std: float) -> Param:
        return self.add(name, self.rng.standard_normal(shape) * std)

    def zeros(self, name: str, shape) -> Param:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Param:
        return self.add(name, np.ones(shape))

    def astype(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.astype(dtype)
        for s in self.buffers.values():
            s.mean = s.mean.astype(dtype)
            s.var = s.var.astype(dtype)


class Scope:
    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def scope(self, name: str) -> "Scope":
        return Scope(self.store, self._n(name))

    def _n(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def normal(self, name, shape, std):
        return self.store.normal(self._n(name), shape, std)

    def zeros(self, name, shape):
        return self.store.zeros(self._n(name), shape)

    def ones(self, name, shape):
        return self.store.ones(self._n(name), shape)

    def add_stats(self, name, channels):
        return self.store.add_stats(self._n(name), channels)


@dataclass
class Conv:
    weight: Param
    bias: Param | None
    stride: int | tuple[int, int] = 1
    pad: int | tuple[int, int] = 0
    groups: int = 1

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


def conv(scope: Scope, name: str, c_in: int, c_out: int, k: int | tuple[int, int] = 3, stride=1, pad=None,
         groups: int = 1, bias: bool = True, gain: float = 2.0) -> Conv:
    """Conv layer with fan-in scaled normal init (std = sqrt(gain / fan_in))."""
    kh, kw = (k, k) if isinstance(k, int) else k
    if pad is None:
        pad = (kh // 2, kw // 2)
    fan_in = (c_in // groups) * kh * kw
    w = scope.normal(f"{name}.weight", (c_out, c_in // groups, kh, kw), np.sqrt(gain / fan_in))
    b = scope.zeros(f"{name}.bias", (c_out,)) if bias else None
    return Conv(w, b, stride, pad, groups)


@dataclass
class BatchNorm:
    gamma: Param
    beta: Param
    stats: RunningStats
    eps: float = 1e-5

    def __call__(self, x, training: bool = False) -> Tensor:
        return ops.normalize(x, "batch", self.gamma, self.beta, self.eps, self.stats, training)


def batchnorm(scope: Scope, name: str, channels: int) -> BatchNorm:
    return BatchNorm(scope.ones(f"{name}.gamma", (channels,)), scope.zeros(f"{name}.beta", (channels,)),
                     scope.add_stats(name, channels))


@dataclass
class LayerNorm:
    gamma: Param
    beta: Param
    eps: float = 1e-5

    def __call__(self, x) -> Tensor:
        return ops.normalize(x, "layer", self.gamma, self.beta, self.eps)


def layernorm(scope: Scope, name: str, channels: int) -> LayerNorm:
    return LayerNorm(scope.ones(f"{name}.gamma", (channels,)), scope.zeros(f"{name}.beta", (channels,)))


@dataclass
class Linear:
    weight: Param
    bias: Param | None

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


def linear(scope: Scope, name: str, c_in: int, c_out: int, gain: float = 1.0) -> Linear:
    return Linear(scope.normal(f"{name}.weight", (c_out, c_in), np.sqrt(gain / c_in)),
                  scope.zeros(f"{name}.bias", (c_out,)))


def zero_params(obj) -> None:
    """Zero every Param reachable from a layer dataclass (tests and identity checks)."""
    for p in iter_params(obj):
        p.data[...] = 0


def iter_params(obj):
    if isinstance(obj, Param):
        yield obj
    elif isinstance(obj, (list, tuple)):
        for o in obj:
            yield from iter_params(o)
    elif hasattr(obj, "__dataclass_fields__"):
        for f in obj.__dataclass_fields__:
            yield from iter_params(getattr(obj, f))
