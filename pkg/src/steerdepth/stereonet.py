"""Tiny steerable stereo matcher.

Pipeline: shared conv encoder to half resolution -> correlation cost volume
-> conditional fusion (DCI then C-MoE) -> soft-argmax over disparity bins ->
bilinear upsampling -> T conditional residual refinements at full
resolution, reading the fused features so corrections see the matching
evidence. An optional segmentation head reads the left features and feeds
only the loss.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from . import autograd as ag
from .autograd import ParameterSet, Tensor
from .condmod import CMoE, DCI, ConditionEmbedding
from .layers import FFN, Conv3x3, Linear


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    features: int = 32
    d_max: int = 16
    refine_iters: int = 2
    use_cmoe: bool = True
    use_dci: bool = True
    use_seg_head: bool = True
    cond_dim: int = 16
    attn_dim: int = 16
    hidden: int = 64
    refine_features: int = 16
    refine_hidden: int = 32
    n_experts: int = 2
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.features < 8:
            raise ModelConfigError("features must be >= 8")
        if self.refine_features < 1 or self.hidden < 1 or self.refine_hidden < 1:
            raise ModelConfigError("layer widths must be positive")
        if self.refine_iters < 0:
            raise ModelConfigError("refine_iters must be >= 0")
        if self.d_max < 2 or self.d_max % 2:
            raise ModelConfigError("d_max must be an even integer >= 2")
        if self.n_experts < 2:
            raise ModelConfigError("n_experts must be >= 2")
        return self

    @property
    def conditional(self) -> bool:
        return self.use_cmoe or self.use_dci

    @property
    def feat_bins(self) -> int:
        return self.d_max // 2 + 1

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class DepthPrediction:
    """``disparity`` (B, H, W); ``distribution`` (B, H/2, W/2, bins);
    ``seg_logits`` (B, H, W) or None; ``iterations`` holds T+1 full-resolution
    disparity maps, the last equal to ``disparity``."""

    disparity: Tensor
    distribution: Tensor
    seg_logits: Tensor | None
    iterations: list[Tensor] = field(default_factory=list)


class ConditionalBlock:
    """Optional DCI followed by a residual C-MoE (or plain FFN when C-MoE is off)."""

    def __init__(self, params: ParameterSet, name: str, cfg: ModelConfig, dim: int, hidden: int):
        self.dci = DCI(params, f"{name}.dci", dim, cfg.cond_dim, cfg.attn_dim) if cfg.use_dci else None
        if cfg.use_cmoe:
            self.ffn = CMoE(params, f"{name}.moe", dim, hidden, cfg.cond_dim, cfg.n_experts)
        else:
            self.ffn = FFN(params, f"{name}.ffn", dim, hidden)

    def __call__(self, x: Tensor, e: Tensor | None) -> Tensor:
        if self.dci is not None:
            x = self.dci(x, e)
        y = self.ffn(x, e) if isinstance(self.ffn, CMoE) else self.ffn(x)
        return x + y


class StereoNet:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg.validate()
        p = self.params = ParameterSet(cfg.seed)
        F = cfg.features
        self.enc = [
            Conv3x3(p, "encoder.conv0", 1, 16, stride=1),
            Conv3x3(p, "encoder.conv1", 16, F, stride=2),
            Conv3x3(p, "encoder.conv2", F, F, stride=1),
        ]
        self.embedding = ConditionEmbedding(p, "cond", cfg.cond_dim) if cfg.conditional else None
        self.fusion_in = Linear(p, "fusion.proj", cfg.feat_bins + F, F)
        self.fusion = ConditionalBlock(p, "fusion", cfg, F, cfg.hidden)
        self.disp_head = Linear(p, "fusion.head", F, cfg.feat_bins, gain=1.0)
        Fr, T = cfg.refine_features, cfg.refine_iters
        self.refine_in = [Linear(p, f"refine{t}.proj", F, Fr) for t in range(T)]
        self.refine_disp = [Linear(p, f"refine{t}.proj_disp", 1, Fr, bias=False) for t in range(T)]
        self.refine_blocks = [ConditionalBlock(p, f"refine{t}", cfg, Fr, cfg.refine_hidden) for t in range(T)]
        self.refine_out = [Linear(p, f"refine{t}.delta", Fr, 1, zero=True) for t in range(T)]
        self.seg = Linear(p, "seg.head", F, 1, gain=1.0) if cfg.use_seg_head else None

    # -- stages -----------------------------------------------------------
    def extract_features(self, image) -> Tensor:
        """(B, H, W) or (H, W) images in [0, 1] -> (B, H/2, W/2, F)."""
        img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        if img.shape[1] % 2 or img.shape[2] % 2:
            raise ag.ShapeError(f"image size {img.shape[1:]} must be divisible by 2")
        x = Tensor(((img - 0.5) * 4.0)[..., None]) if not isinstance(image, Tensor) else ag.reshape(
            (image - 0.5) * 4.0, (*img.shape, 1))
        x = ag.relu(self.enc[0](x))
        x = ag.relu(self.enc[1](x))
        return self.enc[2](x)

    def build_cost_volume(self, left_feats: Tensor, right_feats: Tensor) -> Tensor:
        return build_cost_volume(left_feats, right_feats, self.cfg.feat_bins - 1)

    def embed(self, c: np.ndarray) -> Tensor | None:
        return self.embedding(c) if self.embedding is not None else None

    def conditional_fusion(self, volume: Tensor, left_feats: Tensor, e: Tensor | None) -> Tensor:
        h = self.fusion_in(ag.concat([volume, left_feats]))
        return self.fusion(h, e)

    def soft_argmax(self, fused: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (full-resolution disparity (B, H, W, 1), distribution)."""
        return soft_argmax_disparity(self.disp_head(fused))

    def refine(self, disp: Tensor, feats: Tensor, e: Tensor | None, t: int) -> Tensor:
        """One conditional residual correction at full resolution.

        The input projection of ``concat(upsample(feats), disp / d_max)`` is
        evaluated as ``upsample(W_f feats) + W_d disp / d_max``; bilinear
        upsampling commutes with the per-pixel affine map, so this is the same
        function at a quarter of the cost.
        """
        if not 0 <= t < self.cfg.refine_iters:
            raise IndexError(f"refinement iteration {t} outside [0, {self.cfg.refine_iters})")
        proj = ag.upsample2x(self.refine_in[t](feats))
        x = ag.relu(proj + self.refine_disp[t](disp / float(self.cfg.d_max)))
        x = self.refine_blocks[t](x, e)
        delta = self.refine_out[t](x)
        return ag.clamp(disp + delta, 0.0, float(self.cfg.d_max))

    def seg_head(self, left_feats: Tensor) -> Tensor:
        if self.seg is None:
            raise RuntimeError("segmentation head disabled in this model")
        logits = ag.upsample2x(self.seg(left_feats))
        return ag.reshape(logits, logits.shape[:3])

    # -- full model -------------------------------------------------------
    def forward(self, left, right, c) -> DepthPrediction:
        left = np.asarray(left, dtype=np.float64)
        right = np.asarray(right, dtype=np.float64)
        if left.ndim == 2:
            left, right = left[None], right[None]
        c = np.broadcast_to(np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0), (left.shape[0],))
        fl = self.extract_features(left)
        fr = self.extract_features(right)
        e = self.embed(c)
        volume = self.build_cost_volume(fl, fr)
        fused = self.conditional_fusion(volume, fl, e)
        disp, dist = self.soft_argmax(fused)
        iters = [disp]
        for t in range(self.cfg.refine_iters):
            disp = self.refine(disp, fused, e, t)
            iters.append(disp)
        squeeze = [ag.reshape(d, d.shape[:3]) for d in iters]
        seg = self.seg_head(fl) if self.seg is not None else None
        return DepthPrediction(disparity=squeeze[-1], distribution=dist, seg_logits=seg, iterations=squeeze)

    __call__ = forward

    def predict(self, left, right, c: float) -> np.ndarray:
        """(H, W) disparity for a single pair, without recording a graph."""
        with ag.no_grad():
            return self.forward(left, right, c).disparity.data[0]


def build_cost_volume(left_feats: Tensor, right_feats: Tensor, max_disp: int) -> Tensor:
    """``volume[b, v, u, d] = <left[v, u], right[v, u - d]> / sqrt(F)``, 0 where ``u < d``."""
    if left_feats.shape != right_feats.shape:
        raise ag.ShapeError(f"cost volume: {left_feats.shape} != {right_feats.shape}")
    return ag.correlation(left_feats, right_feats, max_disp, scale=1.0 / math.sqrt(left_feats.shape[-1]))


def soft_argmax_disparity(logits: Tensor) -> tuple[Tensor, Tensor]:
    """Expected bin under softmax(logits), doubled and upsampled to full resolution."""
    dist = ag.softmax(logits)
    bins = np.arange(logits.shape[-1], dtype=np.float64)
    half = ag.sum_(dist * Tensor(np.broadcast_to(bins, dist.shape)), axis=-1, keepdims=True)
    return ag.upsample2x(half * 2.0), dist
