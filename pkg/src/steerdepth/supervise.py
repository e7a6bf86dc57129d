"""Condition-aware supervision.

Everything here works in disparity space: a larger disparity is a nearer
surface. ``disp0`` holds the nearest layer and ``disp1`` the second layer
(NaN where a pixel has a single opaque surface).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autograd as ag
from .autograd import Tensor
from .scenegen import StereoSample

ITERATION_GAMMA = 0.8


class DegenerateBatchError(ValueError):
    pass


@dataclass
class SupervisionTarget:
    target: np.ndarray
    valid: np.ndarray
    layer: np.ndarray  # 0 nearest, 1 second, -1 invalid


@dataclass
class LossWeights:
    disparity: float = 1.0
    seg: float = 0.2

    def __post_init__(self):
        if self.disparity < 0 or self.seg < 0:
            raise ValueError("loss weights must be non-negative")


def reference_disparity(c: float, d_max: float) -> float:
    return (1.0 - c) * d_max


def select_target_layer(disp0: np.ndarray, disp1: np.ndarray, d_ref: float) -> SupervisionTarget:
    """Per pixel, the layer disparity closest to ``d_ref``.

    Exact ties go to the nearer layer (index 0). Single-layer pixels always
    select their only layer; pixels with no finite layer are invalid.
    """
    disp0 = np.asarray(disp0)
    disp1 = np.asarray(disp1)
    has0 = np.isfinite(disp0)
    has1 = np.isfinite(disp1)
    err0 = np.abs(np.where(has0, disp0, 0.0) - d_ref)
    err1 = np.abs(np.where(has1, disp1, 0.0) - d_ref)
    pick1 = has1 & (~has0 | (err1 < err0))
    layer = np.where(pick1, 1, np.where(has0, 0, -1))
    target = np.where(pick1, disp1, np.where(has0, disp0, 0.0))
    return SupervisionTarget(target=target.astype(np.float64), valid=layer >= 0, layer=layer)


def layer_consistency_mask(target: SupervisionTarget, transmissive: np.ndarray) -> SupervisionTarget:
    """Within each 4-connected transmissive component keep only the pixels
    whose chosen layer is the component's majority (ties keep layer 0)."""
    labels, n = ndimage.label(transmissive)
    if n == 0:
        return target
    layer = target.layer
    votes = target.valid & transmissive
    counts0 = np.bincount(labels[votes & (layer == 0)], minlength=n + 1)
    counts1 = np.bincount(labels[votes & (layer == 1)], minlength=n + 1)
    dominant = np.where(counts1 > counts0, 1, 0)
    keep = ~transmissive | (layer == dominant[labels])
    valid = target.valid & keep
    return SupervisionTarget(
        target=target.target,
        valid=valid,
        layer=np.where(valid, layer, -1),
    )


def build_target(sample: StereoSample, c: float, use_masking: bool = True) -> SupervisionTarget:
    t = select_target_layer(sample.disp0, sample.disp1, reference_disparity(c, sample.d_max))
    return layer_consistency_mask(t, sample.mask) if use_masking else t


@dataclass
class CSampler:
    """Mixed c sampling: with probability ``rho`` a c that puts d_ref exactly
    on a random transmissive pixel's layer, otherwise uniform in [0, 1]."""

    rho: float = 0.5
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    def sample(self, sample: StereoSample) -> float:
        return sample_condition(self, sample)


def sample_condition(sampler: CSampler, sample: StereoSample) -> float:
    rng = sampler.rng
    branch = rng.random()
    uniform = rng.random()
    if branch < sampler.rho:
        rows, cols = np.nonzero(sample.mask)
        if rows.size:
            k = int(rng.integers(rows.size))
            layers = [float(sample.disp0[rows[k], cols[k]]), float(sample.disp1[rows[k], cols[k]])]
            d = layers[int(rng.integers(2))]
            return float(np.clip(1.0 - d / sample.d_max, 0.0, 1.0))
    return float(uniform)


def _masked_mean(x: Tensor, weights: np.ndarray) -> Tensor:
    return ag.sum_(x * Tensor(weights))


def compute_loss(
    iterations: list[Tensor],
    seg_logits: Tensor | None,
    targets: list[SupervisionTarget],
    seg_gt: np.ndarray | None,
    weights: LossWeights | None = None,
    gamma: float = ITERATION_GAMMA,
) -> Tensor:
    """``w_d * mean_valid sum_t gamma^(T-t) |d_t - target| + w_seg * mean BCE``.

    ``iterations`` are (B, H, W) disparity tensors (T+1 of them); ``targets``
    one per batch item; ``seg_gt`` is the (B, H, W) transmissive mask.
    """
    weights = weights or LossWeights()
    target = np.stack([t.target for t in targets])
    valid = np.stack([t.valid for t in targets]).astype(np.float64)
    if target.shape != iterations[-1].shape:
        raise ag.ShapeError(f"target shape {target.shape} != prediction {iterations[-1].shape}")
    n_valid = valid.sum()
    if n_valid == 0:
        raise DegenerateBatchError("no valid supervision pixels in batch")
    T = len(iterations) - 1
    tgt = Tensor(target)
    loss = None
    for t, d in enumerate(iterations):
        term = _masked_mean(ag.abs_(d - tgt), valid * (weights.disparity * gamma ** (T - t) / n_valid))
        loss = term if loss is None else loss + term
    if seg_logits is not None and seg_gt is not None and weights.seg > 0:
        y = Tensor(np.asarray(seg_gt, dtype=np.float64))
        bce = ag.softplus(seg_logits) - seg_logits * y
        loss = loss + ag.mean(bce) * weights.seg
    return loss
