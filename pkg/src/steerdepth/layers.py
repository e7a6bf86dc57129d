"""Affine, convolution and feed-forward building blocks on :mod:`autograd`."""

from __future__ import annotations

import math

from . import autograd as ag
from .autograd import ParameterSet, Tensor


class Linear:
    def __init__(self, params: ParameterSet, name: str, d_in: int, d_out: int,
                 bias: bool = True, zero: bool = False, gain: float = 2.0):
        self.d_in, self.d_out = d_in, d_out
        if zero:
            self.weight = params.zeros(f"{name}.weight", (d_in, d_out))
        else:
            self.weight = params.normal(f"{name}.weight", (d_in, d_out), math.sqrt(gain / d_in))
        self.bias = params.zeros(f"{name}.bias", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ag.ShapeError(f"linear: expected last dim {self.d_in}, got {x.shape}")
        y = ag.matmul(x, self.weight)
        if self.bias is not None:
            y = y + ag.broadcast(self.bias, y.shape)
        return y


class Conv3x3:
    def __init__(self, params: ParameterSet, name: str, c_in: int, c_out: int, stride: int = 1):
        self.stride = stride
        self.weight = params.normal(f"{name}.weight", (3, 3, c_in, c_out), math.sqrt(2.0 / (9 * c_in)))
        self.bias = params.zeros(f"{name}.bias", (c_out,))

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.conv2d(x, self.weight, self.stride)
        return y + ag.broadcast(self.bias, y.shape)


class FFN:
    """Two affine layers with a ReLU in between."""

    def __init__(self, params: ParameterSet, name: str, dim: int, hidden: int):
        self.w1 = Linear(params, f"{name}.w1", dim, hidden)
        self.w2 = Linear(params, f"{name}.w2", hidden, dim, gain=1.0)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(ag.relu(self.w1(x)))


def expand_per_sample(v: Tensor, like_shape: tuple[int, ...]) -> Tensor:
    """Broadcast a per-sample vector (B, D) over the spatial axes of ``like_shape``."""
    b, d = v.shape
    if like_shape[0] != b:
        raise ag.ShapeError(f"per-sample vector batch {b} != feature batch {like_shape[0]}")
    mid = (1,) * (len(like_shape) - 2)
    return ag.broadcast(ag.reshape(v, (b, *mid, d)), (*like_shape[:-1], d))
