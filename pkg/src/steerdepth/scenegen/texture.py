"""Deterministic multi-octave value noise."""

from __future__ import annotations

import numpy as np


def _lattice_field(rng: np.random.Generator, height: int, width: int, cell: float) -> np.ndarray:
    gh = int(np.ceil(height / cell)) + 2
    gw = int(np.ceil(width / cell)) + 2
    grid = rng.random((gh, gw))
    y = np.arange(height) / cell
    x = np.arange(width) / cell
    yi, xi = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = (y - yi)[:, None], (x - xi)[None, :]
    v00 = grid[yi][:, xi]
    v01 = grid[yi][:, xi + 1]
    v10 = grid[yi + 1][:, xi]
    v11 = grid[yi + 1][:, xi + 1]
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return top + fy * (bottom - top)


def make_texture(
    seed: int,
    octaves: int,
    width: int,
    height: int,
    base_cell: float = 16.0,
    persistence: float = 0.5,
) -> np.ndarray:
    """Value-noise texture in [0, 1], a pure function of its arguments.

    Octave ``k`` uses lattice cells of ``base_cell / 2**k`` pixels (at least
    one) with amplitude ``persistence**k``. The sum is min-max stretched so
    every texture spans the full range.
    """
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    rng = np.random.default_rng(seed)
    acc = np.zeros((height, width))
    for k in range(octaves):
        cell = max(base_cell / 2**k, 1.0)
        acc += persistence**k * _lattice_field(rng, height, width, cell)
    lo, hi = acc.min(), acc.max()
    if hi - lo < 1e-12:
        return np.full_like(acc, 0.5)
    return (acc - lo) / (hi - lo)
