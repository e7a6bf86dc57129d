from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .params import Parameter
from .tensor import Tensor


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tol for e in self.errors.values())

    def failures(self) -> list[str]:
        return [n for n, e in self.errors.items() if not (np.isfinite(e) and e < self.tol)]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` against central differences.

    The numeric estimate is Richardson-extrapolated from steps ``h`` and
    ``h/2``, which cancels the O(h^2) term of the plain central difference.

    ``max_entries`` caps how many elements per parameter are probed (chosen
    at random with ``seed``); ``None`` probes all of them.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for p in params:
        p.tensor.grad = None
    root = f()
    root.backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for p in params:
        p.tensor.data = np.ascontiguousarray(p.tensor.data)
        data = p.tensor.data
        analytic = np.zeros_like(data) if p.grad is None else p.grad.copy()
        flat = data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            central = []
            for step in (h, h / 2):
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                central.append((fp - fm) / (2.0 * step))
            flat[i] = orig
            numeric[j] = (4.0 * central[1] - central[0]) / 3.0
        report.errors[p.name] = relative_error(analytic.reshape(-1)[idx], numeric, floor)
    for p in params:
        p.tensor.grad = None
    return report
