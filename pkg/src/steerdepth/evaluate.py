"""Disparity metrics, the region-partitioned report and property checks.

A *predictor* is any callable ``(sample, c) -> (H, W) disparity``. Regions:
``opaque`` compares against the single layer, ``transmissive_first``
against the nearest layer and ``transmissive_last`` against the second.
The toy renderer has no occlusions, so there is no Non-Occ/All split.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .scenegen import StereoSample
from .supervise import reference_disparity, select_target_layer

Predictor = Callable[[StereoSample, float], np.ndarray]

REGIONS = ("opaque", "transmissive_first", "transmissive_last")
TAUS = (1.0, 2.0, 4.0)
METRICS = ("EPE",) + tuple(f"Bad-{int(t)}" for t in TAUS)


class EmptyMaskError(ValueError):
    pass


def _masked_errors(pred, gt, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("mask selects no pixels")
    return np.abs(np.asarray(pred, dtype=np.float64)[mask] - np.asarray(gt, dtype=np.float64)[mask])


def epe(pred, gt, mask) -> float:
    """Mean absolute disparity error over ``mask``."""
    return float(_masked_errors(pred, gt, mask).mean())


def bad_tau(pred, gt, mask, tau: float) -> float:
    """Percentage of masked pixels with error strictly greater than ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return float(100.0 * (_masked_errors(pred, gt, mask) > tau).mean())


def model_predictor(model) -> Predictor:
    def predict(sample: StereoSample, c: float) -> np.ndarray:
        return model.predict(sample.left, sample.right, c)

    return predict


def oracle_predictor(sample: StereoSample, c: float) -> np.ndarray:
    """The supervision rule itself used as an estimator."""
    return select_target_layer(sample.disp0, sample.disp1, reference_disparity(c, sample.d_max)).target


def _region_pairs(sample: StereoSample):
    opaque = ~sample.mask
    return {
        "opaque": (sample.disp0, opaque),
        "transmissive_first": (sample.disp0, sample.mask),
        "transmissive_last": (sample.disp1, sample.mask),
    }


@dataclass
class Cell:
    pixels: int = 0
    abs_err: float = 0.0
    bad: dict[float, int] = field(default_factory=lambda: {t: 0 for t in TAUS})

    def add(self, errors: np.ndarray) -> None:
        self.pixels += int(errors.size)
        self.abs_err += float(errors.sum())
        for t in TAUS:
            self.bad[t] += int((errors > t).sum())

    def values(self) -> dict[str, float] | None:
        if self.pixels == 0:
            return None
        out = {"EPE": self.abs_err / self.pixels}
        for t in TAUS:
            out[f"Bad-{int(t)}"] = 100.0 * self.bad[t] / self.pixels
        return out


@dataclass
class MetricsReport:
    c_values: tuple[float, ...]
    rows: list[dict] = field(default_factory=list)
    cells: dict[tuple[str, float], Cell] = field(default_factory=dict)

    def get(self, region: str, c: float, metric: str) -> float | None:
        vals = self.cells[(region, float(c))].values()
        return None if vals is None else vals[metric]

    def grid(self) -> dict:
        """``{region: {c: {"pixels": n, "EPE": .., "Bad-1": ..} | {"pixels": 0, "absent": True}}}``."""
        out: dict = {}
        for region in REGIONS:
            out[region] = {}
            for c in self.c_values:
                cell = self.cells[(region, c)]
                vals = cell.values()
                out[region][f"{c:g}"] = {"pixels": cell.pixels, **vals} if vals else {"pixels": 0, "absent": True}
        return out


def _map(fn, items: Sequence, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def region_report(
    predictor: Predictor,
    samples: Sequence[StereoSample],
    c_values: Iterable[float] = (0.0, 1.0),
    names: Sequence[str] | None = None,
    workers: int = 1,
) -> MetricsReport:
    if not samples:
        raise ValueError("dataset is empty")
    c_values = tuple(float(c) for c in c_values)
    names = list(names) if names is not None else [f"{i:05d}" for i in range(len(samples))]
    report = MetricsReport(c_values=c_values)
    for region in REGIONS:
        for c in c_values:
            report.cells[(region, c)] = Cell()
    preds = _map(lambda s: [np.asarray(predictor(s, c), dtype=np.float64) for c in c_values], samples, workers)
    # ordered reduction keeps the aggregate independent of the worker count
    for name, sample, per_c in zip(names, samples, preds):
        for c, pred in zip(c_values, per_c):
            for region, (gt, mask) in _region_pairs(sample).items():
                if not mask.any():
                    continue
                errors = np.abs(pred[mask] - gt[mask].astype(np.float64))
                report.cells[(region, c)].add(errors)
                cell = Cell()
                cell.add(errors)
                for metric, value in cell.values().items():
                    report.rows.append({
                        "sample": name, "c": c, "region": region,
                        "metric": metric, "value": value, "pixels": cell.pixels,
                    })
    return report


def write_metrics_csv(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sample", "c", "region", "metric", "value", "pixels"])
        writer.writeheader()
        for row in report.rows:
            writer.writerow({**row, "c": f"{row['c']:g}", "value": repr(float(row["value"]))})


@dataclass
class PropertyReport:
    c_grid: tuple[float, ...]
    determinism: float | None
    monotonicity_violation_rate: float | None
    diversity_coverage: float | None
    opaque_pixels: int
    transmissive_pixels: int
    thresholds: dict[str, float]

    def to_json(self) -> dict:
        return {
            "c_grid": list(self.c_grid),
            "determinism": self.determinism,
            "monotonicity_violation_rate": self.monotonicity_violation_rate,
            "diversity_coverage": self.diversity_coverage,
            "opaque_pixels": self.opaque_pixels,
            "transmissive_pixels": self.transmissive_pixels,
            "thresholds": self.thresholds,
        }


def property_stats(
    stack: np.ndarray,
    layers: np.ndarray,
    transmissive: np.ndarray,
    spread: float = 0.5,
    slack: float = 0.5,
    delta: float = 2.0,
) -> tuple[int, int, int, int, int]:
    """Counts for one sample.

    ``stack`` is (K, H, W) predictions along an ascending c grid; ``layers``
    is (2, H, W) ground-truth layers (NaN where absent). Returns
    (opaque pixels, deterministic opaque pixels, transmissive pixels,
    monotonicity violators, fully covered pixels).
    """
    opaque = ~transmissive
    det = (stack.max(axis=0) - stack.min(axis=0)) < spread
    rises = np.diff(stack, axis=0) > slack  # disparity must not grow with c
    violated = rises.any(axis=0)
    covered = np.ones_like(transmissive)
    for layer in layers:
        present = np.isfinite(layer)
        hit = (np.abs(stack - np.where(present, layer, 0.0)[None]) <= delta).any(axis=0)
        covered &= hit | ~present
    return (
        int(opaque.sum()),
        int((det & opaque).sum()),
        int(transmissive.sum()),
        int((violated & transmissive).sum()),
        int((covered & transmissive).sum()),
    )


def check_properties(
    predictor: Predictor,
    samples: Sequence[StereoSample],
    c_grid: Sequence[float] = tuple(np.linspace(0.0, 1.0, 11)),
    spread: float = 0.5,
    slack: float = 0.5,
    delta: float = 2.0,
    workers: int = 1,
) -> PropertyReport:
    c_grid = tuple(float(c) for c in c_grid)
    if list(c_grid) != sorted(c_grid):
        raise ValueError("c grid must be sorted ascending")

    def one(sample: StereoSample):
        stack = np.stack([np.asarray(predictor(sample, c), dtype=np.float64) for c in c_grid])
        layers = np.stack([sample.disp0, sample.disp1]).astype(np.float64)
        return property_stats(stack, layers, sample.mask, spread, slack, delta)

    totals = np.zeros(5, dtype=np.int64)
    for counts in _map(one, samples, workers):
        totals += np.asarray(counts)
    n_op, n_det, n_tr, n_viol, n_cov = (int(x) for x in totals)
    return PropertyReport(
        c_grid=c_grid,
        determinism=n_det / n_op if n_op else None,
        monotonicity_violation_rate=n_viol / n_tr if n_tr else None,
        diversity_coverage=n_cov / n_tr if n_tr else None,
        opaque_pixels=n_op,
        transmissive_pixels=n_tr,
        thresholds={"spread": spread, "slack": slack, "delta": delta},
    )
