from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, finite_diff_check, relative_error
from .optim import SGD, Adam, MissingGradientError, OptimizerState
from .params import Parameter, ParameterSet
from .tensor import (
    OP_KINDS,
    NonFiniteError,
    NonScalarRootError,
    ShapeError,
    Tensor,
    abs_,
    add,
    ancestors,
    as_tensor,
    backward,
    broadcast,
    clamp,
    concat,
    conv2d,
    correlation,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    set_strict,
    sigmoid,
    slice_,
    softmax,
    softplus,
    strict_mode,
    sub,
    sum_,
    upsample2x,
)


def forward_op(kind: str, inputs, **kwargs) -> Tensor:
    """Dispatch an op by its registry name, e.g. ``forward_op("add", [a, b])``."""
    fn = _DISPATCH.get(kind)
    if fn is None:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {OP_KINDS}")
    if kind == "concat-lastdim":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


_DISPATCH = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d-3x3": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax-lastdim": softmax,
    "mean": mean,
    "sum": sum_,
    "concat-lastdim": concat,
    "slice": slice_,
    "broadcast": broadcast,
    "reshape": reshape,
    "abs": abs_,
    "clamp": clamp,
    "softplus": softplus,
    "upsample2x": upsample2x,
    "correlation": correlation,
}
assert set(_DISPATCH) == set(OP_KINDS)
