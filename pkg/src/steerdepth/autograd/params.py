"""Named parameters and a small registry that hands them out to layers."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


class ParameterSet:
    """Ordered, uniquely named parameter collection.

    Each parameter draws its initial values from a generator seeded by
    ``(seed, name)`` so that adding or removing a sub-network never changes
    the initialisation of the others.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._params: dict[str, Parameter] = {}

    def rng_for(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def add(self, name: str, values: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=trainable, name=name)
        self._params[name] = Parameter(name, t, trainable)
        return t

    def normal(self, name: str, shape, std: float) -> Tensor:
        return self.add(name, self.rng_for(name).normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [n for n in self._params if n not in state]
        unexpected = [n for n in state if n not in self._params]
        if strict and (missing or unexpected):
            raise KeyError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")
        for name, values in state.items():
            if name not in self._params:
                continue
            p = self._params[name]
            if p.data.shape != values.shape:
                raise ValueError(f"{name}: shape {values.shape} != {p.data.shape}")
            p.tensor.data = np.array(values, dtype=np.float64)
