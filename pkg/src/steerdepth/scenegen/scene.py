from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .render import Layer, render_view
from .texture import make_texture


class SceneConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    d_max: float = 16.0
    d_bg_lo: float = 1.0
    d_bg_hi: float = 6.0
    d_fg_lo: float = 9.0
    d_fg_hi: float = 15.0
    alpha_lo: float = 0.3
    alpha_hi: float = 0.6
    coverage_lo: float = 0.15
    coverage_hi: float = 0.45
    octaves: int = 4
    texture_cell: float = 8.0
    plate_border: int = 0
    noise_std: float = 0.0
    seed: int = 0

    def validate(self) -> "SceneConfig":
        checks = [
            (self.width >= 2 and self.height >= 2, "width, height >= 2"),
            (self.d_max > 0, "d_max > 0"),
            (0 <= self.d_bg_lo <= self.d_bg_hi <= self.d_max, "0 <= d_bg_lo <= d_bg_hi <= d_max"),
            (0 <= self.d_fg_lo <= self.d_fg_hi <= self.d_max, "0 <= d_fg_lo <= d_fg_hi <= d_max"),
            (self.d_fg_lo > self.d_bg_hi, "d_fg_lo > d_bg_hi (foreground strictly nearer)"),
            (0 < self.alpha_lo <= self.alpha_hi < 1, "0 < alpha_lo <= alpha_hi < 1"),
            (0 <= self.coverage_lo <= self.coverage_hi <= 1, "0 <= coverage_lo <= coverage_hi <= 1"),
            (self.octaves >= 1, "octaves >= 1"),
            (self.texture_cell >= 1, "texture_cell >= 1"),
            (self.plate_border >= 0, "plate_border >= 0"),
            (self.noise_std >= 0, "noise_std >= 0"),
        ]
        for ok, rule in checks:
            if not ok:
                raise SceneConfigError(f"invalid scene config: requires {rule}")
        return self

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SceneConfigError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class StereoSample:
    """Rectified grayscale pair with layered ground truth.

    ``disp0`` is the nearest surface; ``disp1`` is the second surface and NaN
    wherever only one layer exists. ``mask`` marks transmissive pixels.
    """

    left: np.ndarray
    right: np.ndarray
    disp0: np.ndarray
    disp1: np.ndarray
    mask: np.ndarray
    alpha: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape

    @property
    def d_max(self) -> float:
        return float(self.meta["config"]["d_max"])

    def layer_count(self) -> np.ndarray:
        return np.where(np.isnan(self.disp1), 1, 2)

    def check_invariants(self) -> None:
        d_max = self.d_max
        two = ~np.isnan(self.disp1)
        if not np.array_equal(two, self.mask):
            raise AssertionError("transmissive mask disagrees with layer count")
        if np.any(self.disp0 < 0) or np.any(self.disp0 > d_max):
            raise AssertionError("nearest-layer disparity out of range")
        d1 = self.disp1[two]
        if np.any(d1 < 0) or np.any(d1 > d_max):
            raise AssertionError("second-layer disparity out of range")
        if np.any(self.disp0[two] <= d1):
            raise AssertionError("layers not strictly decreasing in disparity")


def _plate_rect(rng: np.random.Generator, cfg: SceneConfig) -> tuple[int, int, int, int]:
    """(row0, col0, h, w) of an axis-aligned rectangle with area fraction in range."""
    H, W = cfg.height, cfg.width
    total = H * W
    frac = rng.uniform(cfg.coverage_lo, cfg.coverage_hi)
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    area = frac * total
    h = int(np.clip(round(math.sqrt(area / aspect)), 0, H))
    w = int(np.clip(round(area / h), 0, W)) if h else 0
    lo, hi = cfg.coverage_lo * total, cfg.coverage_hi * total
    # rounding can push the area outside the configured band; nudge back in
    while h * w > hi and (w > 0 or h > 0):
        if w >= h and w > 0:
            w -= 1
        else:
            h -= 1
    while h * w < lo:
        if w < W and (w <= h or h == H):
            w += 1
        elif h < H:
            h += 1
        else:
            break
    if h == 0 or w == 0:
        h = w = 0
    r0 = int(rng.integers(0, H - h + 1))
    c0 = int(rng.integers(0, W - w + 1))
    return r0, c0, h, w


def generate_scene(config: SceneConfig, seed: int) -> StereoSample:
    """Two-layer scene: opaque textured background plus an optional
    semi-transparent rectangular plate. Pure function of (config, seed)."""
    cfg = config.validate()
    rng = np.random.default_rng(int(seed))
    d_bg = float(rng.uniform(cfg.d_bg_lo, cfg.d_bg_hi))
    d_fg = float(rng.uniform(cfg.d_fg_lo, cfg.d_fg_hi))
    alpha = float(rng.uniform(cfg.alpha_lo, cfg.alpha_hi))
    r0, c0, h, w = _plate_rect(rng, cfg)
    tex_seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=3)]

    H, W = cfg.height, cfg.width
    tex_w = W + int(math.ceil(cfg.d_max)) + 2
    bg_tex = make_texture(tex_seeds[0], cfg.octaves, tex_w, H, base_cell=cfg.texture_cell)
    fg_tex = make_texture(tex_seeds[1], cfg.octaves, tex_w, H, base_cell=cfg.texture_cell)
    plate = np.zeros((H, tex_w))
    plate[r0:r0 + h, c0:c0 + w] = 1.0
    if cfg.plate_border and h and w:
        b = cfg.plate_border
        rim = plate.copy()
        rim[r0 + b:r0 + h - b, c0 + b:c0 + w - b] = 0.0
        fg_tex = np.where(rim > 0, 0.0, fg_tex)

    layers = [Layer(bg_tex, d_bg)]
    if h and w:
        layers.insert(0, Layer(fg_tex, d_fg, plate, alpha))
    left = render_view(layers, 0, W, cfg.d_max)
    right = render_view(layers, 1, W, cfg.d_max)
    if cfg.noise_std > 0:
        noise_rng = np.random.default_rng(tex_seeds[2])
        left = left + noise_rng.normal(0.0, cfg.noise_std, left.shape)
        right = right + noise_rng.normal(0.0, cfg.noise_std, right.shape)
    left, right = np.clip(left, 0.0, 1.0), np.clip(right, 0.0, 1.0)

    mask = plate[:, :W] > 0
    disp0 = np.where(mask, d_fg, d_bg).astype(np.float32)
    disp1 = np.where(mask, d_bg, np.nan).astype(np.float32)
    alpha_map = np.where(mask, alpha, 0.0).astype(np.float32)
    meta = {
        "seed": int(seed),
        "config": cfg.to_dict(),
        "d_bg": d_bg,
        "d_fg": d_fg,
        "alpha": alpha,
        "plate": {"row": r0, "col": c0, "height": h, "width": w},
        "texture_seeds": tex_seeds,
        "mask_pixels": int(mask.sum()),
    }
    return StereoSample(
        left=left.astype(np.float32),
        right=right.astype(np.float32),
        disp0=disp0,
        disp1=disp1,
        mask=mask,
        alpha=alpha_map,
        meta=meta,
    )
