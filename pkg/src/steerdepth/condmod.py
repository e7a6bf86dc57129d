"""Condition embedding, conditional mixture-of-experts and direct condition
injection.

The depth preference ``c`` is a scalar in [0, 1] per sample (0 selects the
nearest surface, 1 the farthest). Feature tensors are laid out ``(B, ..., D)``
and the per-sample embedding is broadcast over the middle axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ParameterSet, Tensor
from .layers import FFN, Linear, expand_per_sample

N_FREQUENCIES = 8


def sinusoidal_features(c) -> np.ndarray:
    """``[sin(2^k pi c), cos(2^k pi c)]`` for k = 0..7, interleaved; shape (B, 16)."""
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    freqs = (2.0 ** np.arange(N_FREQUENCIES)) * np.pi
    ang = c[:, None] * freqs[None, :]
    out = np.empty((c.size, 2 * N_FREQUENCIES))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


@dataclass(frozen=True)
class Condition:
    c: float

    def __post_init__(self):
        object.__setattr__(self, "c", float(min(max(self.c, 0.0), 1.0)))


class ConditionEmbedding:
    """``e(c) = W s(c) + b`` with ``s`` the fixed sinusoidal features.

    ``W`` is stored as ``diag(g) V`` with a fixed gain ``g_k = 2^-k`` per
    frequency and learnable ``V``. Under Adam every entry of ``V`` moves at
    about the same rate, so high frequencies stay quiet unless the loss keeps
    asking for them and the learned map stays smooth in ``c``.
    """

    def __init__(self, params: ParameterSet, name: str, dim: int = 16):
        self.dim = dim
        self.gain = np.repeat(2.0 ** -np.arange(N_FREQUENCIES), 2)
        v = params.rng_for(f"{name}.weight").normal(0.0, 1.0, (2 * N_FREQUENCIES, dim))
        self.weight = params.add(f"{name}.weight", v)
        self.bias = params.zeros(f"{name}.bias", (dim,))

    def __call__(self, c) -> Tensor:
        s = Tensor(sinusoidal_features(c) * self.gain)
        y = ag.matmul(s, self.weight)
        return y + ag.broadcast(self.bias, y.shape)


def embed_condition(c, embedding: ConditionEmbedding) -> Tensor:
    return embedding(c.c if isinstance(c, Condition) else c)


class CMoE:
    """Dense soft-routed mixture of ``n_experts`` FFN experts.

    The router sees ``concat(x, e(c))`` and its logits are softmax-normalised,
    so routing weights are non-negative and sum to one per feature vector.
    """

    def __init__(self, params: ParameterSet, name: str, dim: int, hidden: int,
                 cond_dim: int = 16, n_experts: int = 2):
        if n_experts < 2:
            raise ValueError("n_experts must be >= 2")
        self.dim = dim
        self.experts = [FFN(params, f"{name}.expert{i}", dim, hidden) for i in range(n_experts)]
        self.router = Linear(params, f"{name}.router", dim + cond_dim, n_experts, gain=1.0)

    def routing(self, x: Tensor, e: Tensor) -> Tensor:
        return ag.softmax(self.router(ag.concat([x, expand_per_sample(e, x.shape)])))

    def __call__(self, x: Tensor, e: Tensor) -> Tensor:
        return self.forward(x, e)[0]

    def forward(self, x: Tensor, e: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.dim:
            raise ag.ShapeError(f"cmoe: expected feature dim {self.dim}, got {x.shape}")
        weights = self.routing(x, e)
        out = None
        for i, expert in enumerate(self.experts):
            w = ag.broadcast(weights[..., i:i + 1], x.shape)
            term = w * expert(x)
            out = term if out is None else out + term
        return out, weights


class DCI:
    """Single-item condition attention, residual: ``x + sigmoid(<W_q x, k_c> / sqrt(D_a)) v_c``."""

    def __init__(self, params: ParameterSet, name: str, dim: int, cond_dim: int = 16, attn_dim: int = 16):
        self.dim, self.attn_dim = dim, attn_dim
        self.query = Linear(params, f"{name}.query", dim, attn_dim, bias=False, gain=1.0)
        self.key = Linear(params, f"{name}.key", cond_dim, attn_dim, gain=1.0)
        self.value = Linear(params, f"{name}.value", cond_dim, dim, gain=1.0)

    def gate(self, x: Tensor, e: Tensor) -> Tensor:
        q = self.query(x)
        k = expand_per_sample(self.key(e), q.shape)
        return ag.sigmoid(ag.sum_(q * k, axis=-1, keepdims=True) / math.sqrt(self.attn_dim))

    def __call__(self, x: Tensor, e: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ag.ShapeError(f"dci: expected feature dim {self.dim}, got {x.shape}")
        g = ag.broadcast(self.gate(x, e), x.shape)
        v = expand_per_sample(self.value(e), x.shape)
        return x + g * v


def cmoe_forward(x: Tensor, c: Condition, embedding: ConditionEmbedding, moe: CMoE) -> Tensor:
    e = embedding(np.full(x.shape[0], c.c))
    return moe(x, e)


def dci_forward(x: Tensor, c: Condition, embedding: ConditionEmbedding, dci: DCI) -> Tensor:
    e = embedding(np.full(x.shape[0], c.c))
    return dci(x, e)
