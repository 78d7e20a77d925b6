"""
Differentiable operations over :class:`~attbalance.numerics.tensor.Tensor`.

Binary elementwise operations accept exact-shape operands or a scalar
(single-element) operand on either side. Anything else is a
:class:`~attbalance.errors.DimensionError`.
"""

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from ..errors import DimensionError
from .tensor import ArrayLike, Tensor, as_tensor, make_result

DEFAULT_EPS_LOG = 1e-12
LAYER_NORM_EPS = 1e-5

Operand = Union[Tensor, ArrayLike]


def _binary_operands(op: str, a: Operand, b: Operand) -> Tuple[Tensor, Tensor, Tuple[int, ...]]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return a, b, a.shape
    if b.size == 1 and b.ndim <= a.ndim:
        return a, b, a.shape
    if a.size == 1 and a.ndim <= b.ndim:
        return a, b, b.shape
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


def add(a: Operand, b: Operand) -> Tensor:
    a, b, _ = _binary_operands("add", a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), vjp)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b, _ = _binary_operands("sub", a, b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), vjp)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b, _ = _binary_operands("mul", a, b)

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return make_result("mul", a.data * b.data, (a, b), vjp)


def div(a: Operand, b: Operand) -> Tensor:
    a, b, _ = _binary_operands("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return _reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)

    return make_result("div", out, (a, b), vjp)


def neg(x: Operand) -> Tensor:
    x = as_tensor(x)
    return make_result("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Operand, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return make_result("scale", x.data * c, (x,), lambda g: (g * c,))


def log(x: Operand, eps: float = DEFAULT_EPS_LOG) -> Tensor:
    """Natural logarithm of ``max(x, eps)``; zero gradient where clamped."""
    x = as_tensor(x)
    live = x.data > eps
    safe = np.where(live, x.data, eps)

    def vjp(g):
        return (np.where(live, g / safe, 0.0),)

    return make_result("log", np.log(safe), (x,), vjp)


def exp(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def sigmoid(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Operand) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    return make_result("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def abs_(x: Operand) -> Tensor:
    """Absolute value with subgradient 0 at 0."""
    x = as_tensor(x)
    sign = np.sign(x.data)
    return make_result("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def maximum(a: Operand, b: Operand) -> Tensor:
    a, b, _ = _binary_operands("maximum", a, b)
    pick_a = a.data >= b.data

    def vjp(g):
        return _reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)

    return make_result("maximum", np.maximum(a.data, b.data), (a, b), vjp)


def minimum(a: Operand, b: Operand) -> Tensor:
    a, b, _ = _binary_operands("minimum", a, b)
    pick_a = a.data <= b.data

    def vjp(g):
        return _reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)

    return make_result("minimum", np.minimum(a.data, b.data), (a, b), vjp)


def clip(x: Operand, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def sum_all(x: Operand) -> Tensor:
    x = as_tensor(x)
    return make_result("sum_all", np.sum(x.data), (x,), lambda g: (np.full(x.shape, float(g)),))


def _check_axis(op: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def mean_over_axis(x: Operand, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis("mean_over_axis", x, axis)
    n = x.shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return make_result("mean_over_axis", np.mean(x.data, axis=axis), (x,), vjp)


def mean_all(x: Operand) -> Tensor:
    x = as_tensor(x)
    return scale(sum_all(x), 1.0 / x.size)


def softmax(x: Operand, axis: int = -1) -> Tensor:
    """Max-shifted softmax; every slice along ``axis`` sums to one."""
    x = as_tensor(x)
    axis = _check_axis("softmax", x, axis)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_result("softmax", out, (x,), vjp)


def matmul(a: Operand, b: Operand) -> Tensor:
    """Matrix product of ``[..., m, k]`` and ``[..., k, n]`` with equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.ndim < 2
        or a.ndim != b.ndim
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_result("matmul", a.data @ b.data, (a, b), vjp)


def linear(x: Operand, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``[..., in]`` and weight ``[in, out]``."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match {weight.shape}")
    fan_in, fan_out = weight.shape
    flat = x.data.reshape(-1, fan_in)
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    out_shape = x.shape[:-1] + (fan_out,)

    def vjp(g):
        g2 = g.reshape(-1, fan_out)
        grads = [(g2 @ weight.data.T).reshape(x.shape), flat.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result("linear", out.reshape(out_shape), parents, vjp)


def layer_norm(x: Operand, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gain``/``bias``."""
    x = as_tensor(x)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match {x.shape}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.var(x.data, axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        g_gain = np.sum(g * xhat, axis=reduce_axes)
        g_bias = np.sum(g, axis=reduce_axes)
        gxhat = g * gain.data
        gx = inv_std * (
            gxhat
            - np.mean(gxhat, axis=-1, keepdims=True)
            - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return make_result("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), vjp)


def reshape(x: Operand, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from e
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Operand, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return make_result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x: Operand, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradients."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as e:
        raise DimensionError(f"getitem: index {index!r} invalid for shape {x.shape}") from e

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        return (full,)

    return make_result("getitem", np.array(out, dtype=np.float64), (x,), vjp)


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts: List[Tensor] = [as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat: nothing to concatenate")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        shapes = [p.shape for p in parts]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from e
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result("concat", out, parts, vjp)


def stack_scalars(values: Sequence[Tensor]) -> Tensor:
    """Collect single-element tensors into a vector."""
    return concat([reshape(as_tensor(v), (1,)) for v in values], axis=0)
