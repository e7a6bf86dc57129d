from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .params import Parameter


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")


def _trainable(params: Iterable[Parameter]) -> list[Parameter]:
    params = [p for p in params if p.trainable]
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for parameters: {', '.join(missing)}")
    return params


class SGD:
    def __init__(self, params: Iterable[Parameter], lr: float):
        self.params = list(params)
        self.state = OptimizerState(lr=lr)

    def step(self) -> None:
        for p in _trainable(self.params):
            p.tensor.data = p.data - self.state.lr * p.grad
        self.state.step += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None


class Adam:
    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.state = OptimizerState(lr=lr)

    def step(self) -> None:
        params = _trainable(self.params)
        st = self.state
        st.step += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for p in params:
            g = p.grad
            m = st.m.get(p.name)
            v = st.v.get(p.name)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            st.m[p.name], st.v[p.name] = m, v
            p.tensor.data = p.data - st.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None
