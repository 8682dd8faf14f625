"""Architecture and run configuration records.

All records are frozen dataclasses that round-trip through plain JSON
dicts. :func:`from_dict` rejects unknown keys and reports the dotted path
of the offending field.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, fields, is_dataclass
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

from .errors import ConfigError

CLASS_NAMES = ("Chickenpox", "Cowpox", "Measles", "Monkeypox", "Normal")


@dataclass(frozen=True)
class HsFuseConfig:
    gamma1: float = 0.5
    gamma2: float = 0.5
    window: int = 2
    stride: int = 2
    pad: int = 0

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0 or self.gamma1 + self.gamma2 <= 0:
            raise ConfigError("hs gammas must be non-negative with a positive sum")
        if self.window < 1 or self.stride < 1:
            raise ConfigError("hs window and stride must be >= 1")


@dataclass(frozen=True)
class StageConfig:
    dim: int
    blocks: int
    heads: int
    embed_stride: int = 1
    fuse_stride: int = 2

    def __post_init__(self):
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"stage dim {self.dim} not divisible by heads {self.heads}")
        if self.blocks < 0:
            raise ConfigError("stage block count must be >= 0")
        if self.embed_stride not in (1, 2) or self.fuse_stride not in (1, 2):
            raise ConfigError("stage strides must be 1 or 2")

    @property
    def downsample(self) -> bool:
        return self.embed_stride > 1 or self.fuse_stride > 1


DEFAULT_STAGES = (
    StageConfig(64, 1, 1, embed_stride=2, fuse_stride=1),
    StageConfig(128, 1, 2, embed_stride=1, fuse_stride=2),
    StageConfig(256, 2, 4, embed_stride=1, fuse_stride=2),
    StageConfig(512, 1, 8, embed_stride=1, fuse_stride=2),
)


@dataclass(frozen=True)
class BackboneConfig:
    stem_dim: int = 64
    stages: tuple[StageConfig, ...] = DEFAULT_STAGES
    gamma1: float = 0.5
    gamma2: float = 0.5

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ConfigError(f"backbone needs exactly 4 stages, got {len(self.stages)}")
        dims = [s.dim for s in self.stages]
        if any(b < a for a, b in zip(dims, dims[1:])):
            raise ConfigError(f"stage dims must be non-decreasing, got {dims}")
        HsFuseConfig(self.gamma1, self.gamma2)

    def hs_for(self, stage: StageConfig) -> HsFuseConfig:
        if stage.fuse_stride == 2:
            return HsFuseConfig(self.gamma1, self.gamma2, window=2, stride=2, pad=0)
        return HsFuseConfig(self.gamma1, self.gamma2, window=3, stride=1, pad=1)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    num_classes: int = 5
    backbone: BackboneConfig = BackboneConfig()
    residual_widths: tuple[int, ...] = (64, 128, 192, 256)
    spatial_widths: tuple[int, ...] = (32, 64, 96, 128, 160)
    spatial_avg_blocks: tuple[int, ...] = (3,)
    ffn_ratio: int = 4
    eq10_literal: bool = False
    attn_window: int | None = None
    sa_kernel: int = 7
    cfa_kernel: int = 3

    def __post_init__(self):
        if self.num_classes != 5:
            raise ConfigError("the classifier has exactly 5 classes")
        if self.image_size < 8 or self.image_size % 2:
            raise ConfigError("image_size must be even and >= 8")
        if len(self.residual_widths) != 4:
            raise ConfigError("residual branch needs 4 block widths")
        if len(self.spatial_widths) != 5:
            raise ConfigError("spatial branch needs 5 block widths")
        if self.sa_kernel % 2 == 0 or self.cfa_kernel % 2 == 0:
            raise ConfigError("attention kernels must be odd")

    @classmethod
    def micro(cls, divisor: int = 4, image_size: int = 64, **overrides) -> "ModelConfig":
        """Default architecture with every width divided by ``divisor``."""
        base = cls()
        bb = base.backbone
        stages = tuple(dataclasses.replace(s, dim=s.dim // divisor) for s in bb.stages)
        return cls(
            image_size=image_size,
            backbone=dataclasses.replace(bb, stem_dim=bb.stem_dim // divisor, stages=stages),
            residual_widths=tuple(w // divisor for w in base.residual_widths),
            spatial_widths=tuple(w // divisor for w in base.spatial_widths),
            **overrides,
        )

    @property
    def fused_channels(self) -> int:
        return self.residual_widths[-1] + self.spatial_widths[-1] + self.backbone.stages[-1].dim


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr0: float = 1e-3
    decay_factor: float = 0.15
    decay_every: int = 20
    weight_decay: float = 0.04
    decoupled_weight_decay: bool = True
    dropout: float = 0.3
    class_weights: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ConfigError("epochs, batch_size and decay_every must be positive")
        if self.lr0 <= 0 or not 0 < self.decay_factor <= 1:
            raise ConfigError("lr0 must be > 0 and decay_factor in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")


AUGMENT_OPS = ("flip_horizontal", "flip_vertical", "scale", "shear", "reflect")


@dataclass(frozen=True)
class AugmentConfig:
    ops: tuple[str, ...] = AUGMENT_OPS
    scale_range: tuple[float, float] = (0.9, 1.1)
    shear_range: tuple[float, float] = (-10.0, 10.0)
    prob: float = 0.5

    def __post_init__(self):
        unknown = set(self.ops) - set(AUGMENT_OPS)
        if unknown:
            raise ConfigError(f"unknown augmentation ops {sorted(unknown)}")
        lo, hi = self.scale_range
        if not 0.5 <= lo <= hi <= 1.5:
            raise ConfigError("scale_range must lie within [0.5, 1.5]")
        lo, hi = self.shear_range
        if not -20.0 <= lo <= hi <= 20.0:
            raise ConfigError("shear_range must lie within [-20, 20] degrees")
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError("prob must be in [0, 1]")


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    augment: AugmentConfig = AugmentConfig()
    online_augment: bool = False
    balance_target: int | None = None
    toy_per_class: int = 200
    toy_size: int = 64
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class IoConfig:
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    io: IoConfig = IoConfig()

    @classmethod
    def toy(cls) -> "RunConfig":
        """Desk-scale defaults: synthetic 64x64 data, widths divided by 4,
        online flip/transpose augmentation."""
        return cls(model=ModelConfig.micro(4, 64),
                   data=DataConfig(augment=AugmentConfig(ops=("flip_horizontal", "flip_vertical", "reflect")),
                                   online_augment=True))


# -- dict / JSON round trip --------------------------------------------------------

def to_dict(cfg) -> dict[str, Any]:
    def conv(v):
        if is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v

    return conv(cfg)


def _coerce(tp, value, path: str):
    origin = get_origin(tp)
    if is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin in (Union, types.UnionType):
        args = get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: null not allowed")
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, path)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError(errors[0] if errors else f"{path}: invalid value")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        args = get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def from_dict(cls, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {k: _coerce(hints[k], v, f"{path + '.' if path else ''}{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path or cls.__name__}: {e}") from None


def merge(base: dict, patch: dict) -> dict:
    out = dict(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply one ``section.key=value`` override; the value is parsed as JSON
    when possible, otherwise kept as a string."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like section.key=value")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    patch: dict = {}
    node = patch
    keys = dotted.strip().split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return merge(doc, patch)


def load_run_config(path: str | Path | None, overrides: typing.Sequence[str] = (),
                    base: RunConfig | None = None) -> RunConfig:
    doc = to_dict(base or RunConfig())
    if path is not None:
        text = Path(path).read_text()
        try:
            user = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        for key in user:
            if key not in ("model", "train", "data", "io"):
                raise ConfigError(f"{key}: unknown key")
        doc = merge(doc, user)
    for ov in overrides:
        doc = apply_override(doc, ov)
    return from_dict(RunConfig, doc)
