"""Define-by-run reverse-mode differentiation over numpy arrays.

Every op records its parents and a closure mapping the output gradient to
per-parent gradients. Elementwise binary ops require identical shapes; use
:func:`broadcast` explicitly when a bias or per-sample vector has to be
expanded.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

# op-kind registry; gradcheck iterates over this to guarantee coverage
OP_KINDS = (
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d-3x3",
    "relu",
    "sigmoid",
    "softmax-lastdim",
    "mean",
    "sum",
    "concat-lastdim",
    "slice",
    "broadcast",
    "reshape",
    "abs",
    "clamp",
    "softplus",
    "upsample2x",
    "correlation",
)

_STRICT = False
_LOCAL = threading.local()  # per-thread grad-recording switch


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NonScalarRootError(ValueError):
    pass


def set_strict(flag: bool) -> None:
    global _STRICT
    _STRICT = bool(flag)


def is_strict() -> bool:
    return _STRICT


@contextlib.contextmanager
def strict_mode(flag: bool = True) -> Iterator[None]:
    previous = _STRICT
    set_strict(flag)
    try:
        yield
    finally:
        set_strict(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording graph nodes (inference)."""
    previous = getattr(_LOCAL, "enabled", True)
    _LOCAL.enabled = False
    try:
        yield
    finally:
        _LOCAL.enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by Python scalars")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def backward(self) -> None:
        backward(self)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if np.isscalar(value) and like is not None:
        return Tensor(np.full(like.shape, value, dtype=DTYPE))
    return Tensor(value)


def _check_finite(kind: str, inputs: Sequence[Tensor]) -> None:
    for i, t in enumerate(inputs):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{kind}: input {i} contains NaN or Inf")


def _make(kind: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if getattr(_LOCAL, "enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = kind
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


def _prologue(kind: str, inputs: Sequence[Tensor]) -> None:
    if _STRICT:
        _check_finite(kind, inputs)


def _binary_operands(kind: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{kind}: at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ; broadcast explicitly")
    _prologue(kind, (a, b))
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., k) @ (k, m) -> (..., m)``; the right operand must be 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    _prologue("matmul", (a, b))
    ad, bd = a.data, b.data
    k, m = bd.shape

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 on NHWC input.

    ``x``: (B, H, W, Cin); ``w``: (3, 3, Cin, Cout); stride 1 or 2.
    """
    if stride not in (1, 2):
        raise ShapeError(f"conv2d-3x3: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d-3x3: shapes {x.shape} and {w.shape} are incompatible")
    _prologue("conv2d-3x3", (x, w))
    B, H, W, C = x.shape
    cout = w.shape[3]
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # im2col in (ky, kx, c) order so each tap is a contiguous block of columns
    cols = np.empty((B, Ho, Wo, 9, C))
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, 3 * ky + kx, :] = xp[:, ky:ky + he:stride, kx:kx + we:stride, :]
    cols = cols.reshape(B * Ho * Wo, 9 * C)
    wr = w.data.reshape(9 * C, cout)
    out = (cols @ wr).reshape(B, Ho, Wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wr.T).reshape(B, Ho, Wo, 9, C)
        gxp = np.zeros_like(xp)
        for ky in range(3):
            for kx in range(3):
                gxp[:, ky:ky + he:stride, kx:kx + we:stride, :] += gcols[:, :, :, 3 * ky + kx, :]
        return gxp[:, 1:-1, 1:-1, :], gw

    return _make("conv2d-3x3", out, (x, w), bw)


def relu(x: Tensor) -> Tensor:
    _prologue("relu", (x,))
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    _prologue("sigmoid", (x,))
    y = expit(x.data)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _prologue("softmax-lastdim", (x,))
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax-lastdim", y, (x,), bw)


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _prologue("sum", (x,))
    shape = x.shape

    def bw(g):
        return (_expand_reduced(g, shape, axis, keepdims).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _prologue("mean", (x,))
    shape = x.shape
    n = x.data.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        return (_expand_reduced(g, shape, axis, keepdims) / n,)

    return _make("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw)


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; leading shapes must agree."""
    xs = [as_tensor(x) for x in xs]
    lead = xs[0].shape[:-1]
    for x in xs:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat-lastdim: shapes {[t.shape for t in xs]} disagree on leading axes")
    _prologue("concat-lastdim", xs)
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make("concat-lastdim", np.concatenate([x.data for x in xs], axis=-1), xs, bw)


def slice_(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is rejected."""
    if not isinstance(index, tuple):
        index = (index,)
    if any(not isinstance(i, (slice, int, type(Ellipsis))) for i in index):
        raise ShapeError("slice: only basic slicing is supported")
    _prologue("slice", (x,))
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[index] = g
        return (out,)

    return _make("slice", x.data[index].copy(), (x,), bw)


def broadcast(x: Tensor, shape) -> Tensor:
    """numpy-style broadcast of ``x`` to ``shape``; gradient sums back."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from None
    _prologue("broadcast", (x,))
    src = x.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1
    )

    def bw(g):
        return (g.sum(axis=axes, keepdims=True).reshape(src),)

    return _make("broadcast", out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    _prologue("reshape", (x,))
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def abs_(x: Tensor) -> Tensor:
    _prologue("abs", (x,))
    s = np.sign(x.data)
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * s,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    # gradient passes on the closed interval so a clamped value can be pulled back in
    _prologue("clamp", (x,))
    inside = (x.data >= lo) & (x.data <= hi)
    return _make("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softplus(x: Tensor) -> Tensor:
    _prologue("softplus", (x,))
    xd = x.data
    return _make("softplus", np.logaddexp(0.0, xd), (x,), lambda g: (g * expit(xd),))


def _bilinear_matrix(n: int) -> np.ndarray:
    # half-pixel centres: output i samples input (i + 0.5) / 2 - 0.5, edge-clamped
    m = np.zeros((2 * n, n), dtype=DTYPE)
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        m[i, min(max(lo, 0), n - 1)] += 1.0 - frac
        m[i, min(max(lo + 1, 0), n - 1)] += frac
    return m


_UPSAMPLE_CACHE: dict[int, np.ndarray] = {}


def _upsample_matrix(n: int) -> np.ndarray:
    if n not in _UPSAMPLE_CACHE:
        _UPSAMPLE_CACHE[n] = _bilinear_matrix(n)
    return _UPSAMPLE_CACHE[n]


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling of (B, h, w, C) with half-pixel centres."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x: expected (B, h, w, C), got {x.shape}")
    _prologue("upsample2x", (x,))
    uh = _upsample_matrix(x.shape[1])
    uw = _upsample_matrix(x.shape[2])
    B, h, w, C = x.shape
    out = np.matmul(uh, x.data.reshape(B, h, w * C)).reshape(B, 2 * h, w, C)
    out = np.matmul(uw, out)

    def bw(g):
        t = np.matmul(uw.T, g)
        return (np.matmul(uh.T, t.reshape(B, 2 * h, w * C)).reshape(B, h, w, C),)

    return _make("upsample2x", out, (x,), bw)


def correlation(left: Tensor, right: Tensor, max_disp: int, scale: float = 1.0) -> Tensor:
    """Horizontal correlation volume.

    ``out[b, v, u, d] = scale * <left[b, v, u], right[b, v, u - d]>`` for
    ``d = 0..max_disp``, zero where ``u - d < 0``.
    """
    if left.shape != right.shape or left.data.ndim != 4:
        raise ShapeError(f"correlation: shapes {left.shape} and {right.shape} are incompatible")
    if max_disp < 0:
        raise ShapeError("correlation: max_disp must be non-negative")
    _prologue("correlation", (left, right))
    L, R = left.data, right.data
    B, H, W, _ = L.shape
    out = np.zeros((B, H, W, max_disp + 1), dtype=DTYPE)
    for d in range(min(max_disp, W - 1) + 1):
        out[:, :, d:, d] = (L[:, :, d:, :] * R[:, :, : W - d, :]).sum(axis=-1) * scale

    def bw(g):
        gl = np.zeros_like(L)
        gr = np.zeros_like(R)
        for d in range(min(max_disp, W - 1) + 1):
            gd = g[:, :, d:, d:d + 1] * scale
            gl[:, :, d:, :] += gd * R[:, :, : W - d, :]
            gr[:, :, : W - d, :] += gd * L[:, :, d:, :]
        return gl, gr

    return _make("correlation", out, (left, right), bw)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.size != 1:
        raise NonScalarRootError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def ancestors(root: Tensor) -> set[int]:
    """ids of every tensor reachable from ``root`` through recorded graph edges."""
    out: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in out:
            continue
        out.add(id(node))
        stack.extend(node.parents)
    return out
