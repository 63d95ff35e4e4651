"""
Dense tensor core with reverse-mode differentiation.

Every primitive takes and returns `Tensor` objects backed by row-major numpy
arrays. Each non-leaf tensor remembers the `Node` that produced it; a
`ComputationRecord` is the topologically ordered list of those nodes reachable
from an output, and `backward()` walks it in reverse applying each node's
vector-Jacobian product.

Usage:
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    loss = sum_all(matmul(x, w))
    record = ComputationRecord.trace(loss)
    backward(record, loss, [w])
    w.grad  # same shape as w.values

There is no global state: distinct records can be built and differentiated on
different threads.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """Raised when an operation receives NaN or infinite values."""


@dataclass(eq=False)
class Node:
    """One primitive application: tag, inputs and the vector-Jacobian product."""
    op: str
    inputs: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    cost: int = 0


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        name: str | None = None,
        dtype=None,
    ):
        array = np.asarray(values, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(DEFAULT_DTYPE)
        self.values: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the primitives below
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def backward(self, params: Sequence["Tensor"] | None = None) -> dict["Tensor", np.ndarray]:
        record = ComputationRecord.trace(self)
        return backward(record, self, params)


@dataclass
class ComputationRecord:
    """Topologically ordered tensors produced by primitives."""
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "ComputationRecord":
        """Collect every non-leaf tensor reachable from output, inputs first."""
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if tensor.node is None:
                continue
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            for parent in reversed(tensor.node.inputs):
                if parent.node is not None and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)

    def ops(self) -> list[str]:
        return [t.node.op for t in self.nodes]

    def total_cost(self) -> int:
        """Sum of per-node operation counts (multiply-adds for matmul, elements otherwise)."""
        return sum(t.node.cost for t in self.nodes)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _make(values: np.ndarray, op: str, inputs: Sequence[Tensor], vjp, cost: int | None = None) -> Tensor:
    out = Tensor(values)
    out.requires_grad = any(t.requires_grad or t.node is not None for t in inputs)
    out.node = Node(op=op, inputs=tuple(inputs), vjp=vjp, cost=int(values.size if cost is None else cost))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


# ==========================================
# Elementwise arithmetic
# ==========================================

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.values - b.values, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(a.values * b.values, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)

    def vjp(g):
        return (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        )

    return _make(a.values / b.values, "div", (a, b), vjp)


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (g * exponent * np.power(x.values, exponent - 1),)

    return _make(np.power(x.values, exponent), "power", (x,), vjp)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.values <= 0):
        raise NonFiniteError("log: input must be strictly positive")

    def vjp(g):
        return (g / x.values,)

    return _make(np.log(x.values), "log", (x,), vjp)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_values = np.exp(x.values)

    def vjp(g):
        return (g * out_values,)

    return _make(out_values, "exp", (x,), vjp)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp into [low, high]; gradient flows only where the input was inside."""
    x = as_tensor(x)
    inside = (x.values >= low) & (x.values <= high)

    def vjp(g):
        return (g * inside,)

    return _make(np.clip(x.values, low, high), "clip", (x,), vjp)


# ==========================================
# Shape manipulation and reductions
# ==========================================

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None

    out_values = np.matmul(a.values, b.values)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    cost = int(np.prod(batch, dtype=np.int64)) * m * k * n

    def vjp(g):
        grad_a = np.matmul(g, np.swapaxes(b.values, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _make(out_values, "matmul", (a, b), vjp, cost=cost)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _make(np.ascontiguousarray(np.transpose(x.values, axes)), "transpose", (x,), vjp, cost=0)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out_values = x.values.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make(out_values, "reshape", (x,), vjp, cost=0)


def take(x: Tensor, index) -> Tensor:
    """numpy-style indexing; the gradient scatters back with accumulation."""
    x = as_tensor(x)
    out_values = np.array(x.values[index], copy=True)

    def vjp(g):
        grad = np.zeros_like(x.values)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(out_values, "take", (x,), vjp, cost=0)


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.values.sum(), dtype=x.dtype), "sum", (x,), vjp, cost=x.size)


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.values.sum(axis=axis, keepdims=keepdims), "sum", (x,), vjp, cost=x.size)


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return mul(sum_all(x), 1.0 / x.size)


# ==========================================
# Neural-network primitives
# ==========================================

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """
    Numerically stable softmax along axis.

    Args:
        x: Finite logits.
        axis: Axis to normalise over.
        mask: Optional boolean array broadcastable to x; False entries are
            treated as -inf logits and receive exactly zero weight.
    """
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    if not np.all(np.isfinite(x.values)):
        raise NonFiniteError("softmax: input contains non-finite values")

    logits = x.values
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax: every position along the axis is masked")
        logits = np.where(mask, logits, -np.inf)

    shifted = logits - logits.max(axis=axis, keepdims=True)
    weights = np.exp(shifted)
    if mask is not None:
        weights = np.where(mask, weights, 0.0)
    out_values = weights / weights.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out_values).sum(axis=axis, keepdims=True)
        return (out_values * (g - inner),)

    return _make(out_values, "softmax", (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit population variance, then g*z + b."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} and bias {bias.shape} must both be ({width},)"
        )

    centered = x.values - x.values.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(variance + epsilon)
    normalized = centered * inv_std
    out_values = normalized * gain.values + bias.values

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        grad_gain = (g * normalized).sum(axis=reduce_axes)
        grad_bias = g.sum(axis=reduce_axes)
        d_norm = g * gain.values
        grad_x = inv_std * (
            d_norm
            - d_norm.mean(axis=-1, keepdims=True)
            - normalized * (d_norm * normalized).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return _make(out_values, "layer_norm", (x, gain, bias), vjp, cost=5 * x.size)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""
    running_mean: np.ndarray
    running_var: np.ndarray
    updates: int = 0

    @classmethod
    def fresh(cls, width: int, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(np.zeros(width, dtype=dtype), np.ones(width, dtype=dtype), 0)


def batch_norm_1d(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    state: BatchNormState,
    mode: str = "train",
    epsilon: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """
    Batch normalisation over the rows of a [batch x features] tensor.

    Train mode normalises with the batch's population statistics and folds them
    into the running statistics (running = (1 - momentum) * running + momentum * batch).
    Infer mode normalises with the running statistics.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm_1d: expected [batch x features], got {x.shape}")
    width = x.shape[1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"batch_norm_1d: gain {gain.shape} / bias {bias.shape} must be ({width},)")

    if mode == "train":
        rows = x.shape[0]
        if rows < 2:
            raise ValueError(f"batch_norm_1d: train mode needs at least 2 rows, got {rows}")
        mean = x.values.mean(axis=0)
        centered = x.values - mean
        variance = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(variance + epsilon)
        normalized = centered * inv_std

        state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mean
        state.running_var = (1.0 - momentum) * state.running_var + momentum * variance
        state.updates += 1

        def vjp(g):
            grad_gain = (g * normalized).sum(axis=0)
            grad_bias = g.sum(axis=0)
            d_norm = g * gain.values
            grad_x = inv_std * (
                d_norm
                - d_norm.mean(axis=0, keepdims=True)
                - normalized * (d_norm * normalized).mean(axis=0, keepdims=True)
            )
            return grad_x, grad_gain, grad_bias

    elif mode == "infer":
        if state.updates == 0:
            raise ValueError("batch_norm_1d: running statistics are uninitialized; train before inference")
        inv_std = 1.0 / np.sqrt(state.running_var + epsilon)
        normalized = (x.values - state.running_mean) * inv_std

        def vjp(g):
            grad_gain = (g * normalized).sum(axis=0)
            grad_bias = g.sum(axis=0)
            return g * gain.values * inv_std, grad_gain, grad_bias

    else:
        raise ValueError(f"batch_norm_1d: unknown mode {mode!r}, expected 'train' or 'infer'")

    out_values = normalized * gain.values + bias.values
    return _make(out_values, "batch_norm", (x, gain, bias), vjp, cost=5 * x.size)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    active = x.values > 0

    def vjp(g):
        return (g * active,)

    return _make(np.where(active, x.values, 0.0).astype(x.dtype), "relu", (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with the Gaussian CDF from scipy."""
    x = as_tensor(x)
    cdf = ndtr(x.values)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.values * x.values)
        return (g * (cdf + x.values * pdf),)

    return _make((x.values * cdf).astype(x.dtype), "gelu", (x,), vjp)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind in ("identity", "mse-identity"):
        return as_tensor(x)
    raise ValueError(f"Unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is supplied."""
    x = as_tensor(x)
    if rate <= 0.0 or rng is None:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep.astype(x.dtype))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ==========================================
# Reverse pass
# ==========================================

def backward(
    record: ComputationRecord,
    output: Tensor,
    params: Iterable[Tensor] | None = None,
) -> dict[Tensor, np.ndarray]:
    """
    Fill the gradient slot of every leaf reachable from a scalar output.

    Gradient slots are overwritten, not accumulated. Tensors listed in params
    that the output does not depend on receive zeros.

    Returns:
        Mapping from leaf tensor to its gradient array.
    """
    if output.size != 1:
        raise ShapeError(f"backward: seed output must be scalar, got shape {output.shape}")

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.values)}
    leaves: dict[int, Tensor] = {}

    for tensor in reversed(record.nodes):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        for parent, parent_grad in zip(tensor.node.inputs, tensor.node.vjp(g)):
            if parent_grad is None or not (parent.requires_grad or parent.node is not None):
                continue
            key = id(parent)
            if parent.node is None:
                leaves[key] = parent
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = np.asarray(parent_grad, dtype=parent.dtype)

    if output.node is None and output.requires_grad:
        leaves[id(output)] = output

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        result[leaf] = leaf.grad

    for param in params or ():
        if param not in result:
            param.grad = np.zeros_like(param.values)
            result[param] = param.grad

    return result
