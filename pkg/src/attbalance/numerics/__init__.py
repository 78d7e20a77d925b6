"""Dense tensors with reverse-mode automatic differentiation."""

from .gradcheck import GradCheckReport, grad_check
from .ops import (
    DEFAULT_EPS_LOG,
    abs_,
    add,
    clip,
    concat,
    div,
    exp,
    getitem,
    layer_norm,
    linear,
    log,
    matmul,
    maximum,
    mean_all,
    mean_over_axis,
    minimum,
    mul,
    neg,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    stack_scalars,
    sub,
    sum_all,
    transpose,
)
from .tensor import Tape, Tensor, backward, corrupted_gradient, current_tape, no_grad

__all__ = [
    "DEFAULT_EPS_LOG",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "abs_",
    "add",
    "backward",
    "clip",
    "concat",
    "corrupted_gradient",
    "current_tape",
    "div",
    "exp",
    "getitem",
    "grad_check",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "maximum",
    "mean_all",
    "mean_over_axis",
    "minimum",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "stack_scalars",
    "sub",
    "sum_all",
    "transpose",
]
