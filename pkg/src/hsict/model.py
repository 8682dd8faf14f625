"""The full three-stream classifier: HSICT backbone plus residual and
spatial branches, fused by channel augmentation and spatial attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .backbone import BackboneParams, backbone_forward, init_backbone
from .branches import (ResidualBranchParams, SpatialBranchParams, init_residual_branch,
                       init_spatial_branch, residual_branch, spatial_branch)
from .config import ModelConfig
from .errors import DimensionError
from .head import (CfaParams, HeadParams, SpatialAttentionParams, cfa_refine, channel_augment,
                   head_logits, init_cfa, init_head, init_spatial_attention, spatial_attention)
from .layers import ParamStore
from .tensor import Param, Tensor, as_tensor, no_grad


@dataclass
class ForwardResult:
    logits: Tensor
    probs: np.ndarray
    features: Tensor
    fused: Tensor
    stage_outputs: list[Tensor]


class HsictModel:
    """Parameters plus forward pass of the whole network.

    Weights are created deterministically from ``seed``. ``training``
    toggles batch statistics and dropout.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32, dropout: float = 0.3):
        self.cfg = cfg
        self.store = ParamStore(seed, dtype)
        root = self.store.scope("")
        self.backbone: BackboneParams = init_backbone(root.scope("backbone"), cfg.backbone, cfg.image_size,
                                                      cfg.ffn_ratio, cfg.attn_window, cfg.eq10_literal)
        self.residual: ResidualBranchParams = init_residual_branch(root.scope("residual"), cfg.residual_widths)
        self.spatial: SpatialBranchParams = init_spatial_branch(root.scope("spatial"), cfg.spatial_widths,
                                                                cfg.spatial_avg_blocks)
        self.cfa_res: CfaParams = init_cfa(root.scope("cfa_res"), cfg.residual_widths[-1], cfg.cfa_kernel)
        self.cfa_spat: CfaParams = init_cfa(root.scope("cfa_spat"), cfg.spatial_widths[-1], cfg.cfa_kernel)
        self.sa: SpatialAttentionParams = init_spatial_attention(root.scope("sa"), cfg.sa_kernel)
        self.head: HeadParams = init_head(root.scope("head"), cfg.fused_channels, cfg.num_classes, dropout)

    # -- state -------------------------------------------------------------------
    @property
    def params(self) -> dict[str, Param]:
        return self.store.params

    @property
    def dtype(self):
        return self.store.dtype

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "HsictModel":
        self.store.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters followed by batch-norm running statistics, in creation order."""
        state = {name: p.data for name, p in self.params.items()}
        for name, stats in self.store.buffers.items():
            state[f"{name}.running_mean"] = stats.mean
            state[f"{name}.running_var"] = stats.var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise DimensionError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, arr in state.items():
            if expected[name].shape != arr.shape:
                raise DimensionError(f"state tensor {name!r} has shape {arr.shape}, expected {expected[name].shape}")
        for name, p in self.params.items():
            p.data = np.array(state[name], dtype=self.dtype)
        for name, stats in self.store.buffers.items():
            stats.mean = np.array(state[f"{name}.running_mean"], dtype=self.dtype)
            stats.var = np.array(state[f"{name}.running_var"], dtype=self.dtype)

    # -- forward -------------------------------------------------------------------
    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> ForwardResult:
        x = as_tensor(x, self.dtype)
        if x.ndim != 4 or x.shape[1:] != (3, self.cfg.image_size, self.cfg.image_size):
            raise DimensionError(
                f"model built for (N, 3, {self.cfg.image_size}, {self.cfg.image_size}) input, got {x.shape}")
        feat, stages = backbone_forward(x, self.backbone, training)
        r = cfa_refine(residual_branch(x, self.residual, training), self.cfa_res)
        s = cfa_refine(spatial_branch(x, self.spatial, training), self.cfa_spat)
        fused = channel_augment(feat, r, s)
        attended = spatial_attention(fused, self.sa)
        pooled, logits = head_logits(attended, self.head, training, rng)
        probs = ops.softmax_np(logits.data, axis=-1)
        return ForwardResult(logits, probs, pooled, fused, stages)

    def logits_fn(self, training: bool = False):
        """Closure x -> logits, handy for gradient checks."""
        return lambda x: self.forward(x, training).logits

    def predict(self, images: np.ndarray, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode probabilities and penultimate features for a stack of images."""
        probs, feats = [], []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out = self.forward(images[i:i + batch_size])
                probs.append(out.probs)
                feats.append(out.features.data)
        if not probs:
            return (np.zeros((0, self.cfg.num_classes), dtype=self.dtype),
                    np.zeros((0, self.cfg.fused_channels), dtype=self.dtype))
        return np.concatenate(probs), np.concatenate(feats)
