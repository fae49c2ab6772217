"""Reverse-mode automatic differentiation over dense float64 tensors."""

from . import kernels
from .memory import GraphBudgetExceeded, MemoryMeter, current_meter
from .tensor import (
    AutodiffError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    UnsupportedSecondOrderError,
    active_tape,
    add,
    affine,
    as_tensor,
    backward,
    broadcast_to,
    check_soft_leaky_params,
    clamp,
    concat,
    gather,
    grad,
    leaky_relu,
    matmul,
    mean,
    mul,
    no_record,
    reshape,
    scale,
    silu,
    slice_axis,
    soft_leaky_relu,
    softmax_cross_entropy,
    sub,
    sum_to,
    transpose,
    tsum,
)

OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "sum": tsum,
    "mean": mean,
    "affine": affine,
    "silu": silu,
    "leaky_relu": leaky_relu,
    "soft_leaky_relu": soft_leaky_relu,
    "softmax_cross_entropy": softmax_cross_entropy,
    "clamp": clamp,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "gather": gather,
}


def record(op: str, *inputs, **params) -> Tensor:
    """Apply primitive ``op`` by name, recording it on the active tape."""
    try:
        fn = OPS[op]
    except KeyError:
        raise AutodiffError(f"unknown op-kind '{op}'") from None
    return fn(*inputs, **params)


def detach(x: Tensor) -> Tensor:
    return x.detach()


__all__ = [
    "AutodiffError",
    "GraphBudgetExceeded",
    "MemoryMeter",
    "NonFiniteError",
    "OPS",
    "ShapeError",
    "Tape",
    "Tensor",
    "UnsupportedSecondOrderError",
    "active_tape",
    "add",
    "affine",
    "as_tensor",
    "backward",
    "broadcast_to",
    "check_soft_leaky_params",
    "clamp",
    "concat",
    "current_meter",
    "detach",
    "gather",
    "grad",
    "kernels",
    "leaky_relu",
    "matmul",
    "mean",
    "mul",
    "no_record",
    "record",
    "reshape",
    "scale",
    "silu",
    "slice_axis",
    "soft_leaky_relu",
    "softmax_cross_entropy",
    "sub",
    "sum_to",
    "transpose",
    "tsum",
]
