from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DisparityRangeError(ValueError):
    pass


@dataclass
class Layer:
    """A fronto-parallel textured plane.

    ``texture`` (and optional ``mask``) live in texture space: column ``x``
    of a view with shift ``s`` samples texture column ``x + s * disparity``.
    ``mask=None`` means the layer covers everything; ``alpha`` is its opacity.
    """

    texture: np.ndarray
    disparity: float
    mask: np.ndarray | None = None
    alpha: float = 1.0


def sample_shifted(field: np.ndarray, width: int, offset: float) -> np.ndarray:
    """Bilinear horizontal resample: out[:, u] = field[:, u + offset]."""
    x = np.arange(width) + offset
    x0 = np.floor(x).astype(int)
    frac = x - x0
    x1 = np.minimum(x0 + 1, field.shape[1] - 1)
    return field[:, x0] * (1.0 - frac) + field[:, x1] * frac


def render_view(
    layers: list[Layer],
    view_shift: int,
    width: int,
    d_max: float | None = None,
) -> np.ndarray:
    """Composite ``layers`` (front to back) for the left (0) or right (1) view.

    The last layer is treated as opaque. Each layer is sampled at
    ``u + view_shift * disparity`` and blended ``a * front + (1 - a) * back``.
    """
    if view_shift not in (0, 1):
        raise ValueError("view_shift must be 0 (left) or 1 (right)")
    if not layers:
        raise ValueError("at least one layer is required")
    for i, layer in enumerate(layers):
        d = layer.disparity
        if d < 0 or (d_max is not None and d > d_max):
            raise DisparityRangeError(f"layer {i}: disparity {d} outside [0, {d_max}]")
        if width - 1 + view_shift * d > layer.texture.shape[1] - 1:
            raise DisparityRangeError(f"layer {i}: disparity {d} runs past the texture edge")
        if i and d >= layers[i - 1].disparity:
            raise DisparityRangeError("layers must be ordered nearest first (strictly decreasing disparity)")
    back = layers[-1]
    image = sample_shifted(back.texture, width, view_shift * back.disparity)
    for layer in reversed(layers[:-1]):
        off = view_shift * layer.disparity
        colour = sample_shifted(layer.texture, width, off)
        cover = np.ones_like(colour) if layer.mask is None else sample_shifted(layer.mask, width, off)
        a = layer.alpha * cover
        image = a * colour + (1.0 - a) * image
    return image
