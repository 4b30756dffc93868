"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array.  Every differentiable op below builds
a node that remembers its parents and a backward rule mapping the output
gradient to one gradient per parent.  ``Tensor.backward`` walks the graph
once in reverse topological order and *accumulates* into ``.grad``, so a
tensor used twice receives the sum of both contributions.

Broadcasting follows numpy rules; the backward pass sums gradients over the
broadcast axes so every gradient has the shape of its tensor.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericalError, ShapeError

DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (evaluation, tracing)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data: ArrayLike, *, requires_grad: bool = False, name: Optional[str] = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def values(self) -> np.ndarray:
        """Row-major flattened view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- gradients --------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad += grad

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            seed = np.ones(self.shape, dtype=DTYPE)
        else:
            seed = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=DTYPE)
            if seed.shape != self.shape:
                raise ShapeError(f"seed gradient shape {seed.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        pending = {id(self): seed}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            if node.op != "leaf" and node.name is not None:
                node._accumulate(g)
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant instead")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return sum_(self, axis)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value: ArrayLike) -> Tensor:
    return Tensor(value.data if isinstance(value, Tensor) else value)


def zeros(shape: Union[int, Tuple[int, ...]]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))


def _node(data: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise ------------------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise min; on ties the whole gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "minimum")
    take_a = a.data <= b.data

    def backward(g: np.ndarray):
        return _unbroadcast(np.where(take_a, g, 0.0), a.shape), _unbroadcast(np.where(take_a, 0.0, g), b.shape)

    return _node(np.where(take_a, a.data, b.data), (a, b), backward, "minimum")


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise max; on ties the whole gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    take_a = a.data >= b.data

    def backward(g: np.ndarray):
        return _unbroadcast(np.where(take_a, g, 0.0), a.shape), _unbroadcast(np.where(take_a, 0.0, g), b.shape)

    return _node(np.where(take_a, a.data, b.data), (a, b), backward, "maximum")


def elementwise(op_kind: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "minimum": minimum, "maximum": maximum}
    try:
        return ops[op_kind](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}; expected one of {sorted(ops)}") from None


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericalError("log of a non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    positive = a.data > 0
    neg = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(positive, a.data, neg)
    return _node(out, (a,), lambda g: (g * np.where(positive, 1.0, neg + alpha),), "elu")


def abs_(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


# -- reductions and shape ---------------------------------------------------
def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    def backward(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    return mul(sum_(a), 1.0 / a.size)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g: np.ndarray):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(a.data[index], dtype=DTYPE), (a,), backward, "getitem")


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"row ids out of range for table with {table.shape[0]} rows")

    def backward(g: np.ndarray):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _node(table.data[idx], (table,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from exc

    def backward(g: np.ndarray):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tuple(tensors), backward, "stack")


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``b`` a matrix and ``a`` of any rank (last axis contracted)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1:
        raise ShapeError(f"matmul expects a[..., k] @ b[k, n], got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g: np.ndarray):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, b.shape[0]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def conv_1x1(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Per-cell affine map: ``x[H, W, Din] -> [H, W, Dout]``."""
    if x.ndim != 3:
        raise ShapeError(f"conv_1x1 expects an H x W x D input, got {x.shape}")
    if w.ndim != 2 or w.shape[0] != x.shape[2]:
        raise ShapeError(f"conv_1x1 channel mismatch: input {x.shape}, weight {w.shape}")
    out = matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"conv_1x1 bias shape {b.shape} != ({w.shape[1]},)")
        out = add(out, b)
    return out


def unfold_patches(x: Tensor, kernel: int) -> Tensor:
    """Zero-padded k x k neighbourhoods: ``[H, W, D] -> [H, W, k*k*D]``."""
    if kernel % 2 == 0 or kernel < 1:
        raise ShapeError(f"kernel must be a positive odd number, got {kernel}")
    if kernel == 1:
        return x
    h, w, d = x.shape
    r = kernel // 2
    padded = np.pad(x.data, ((r, r), (r, r), (0, 0)))
    offsets = [(di, dj) for di in range(kernel) for dj in range(kernel)]
    out = np.concatenate([padded[di:di + h, dj:dj + w, :] for di, dj in offsets], axis=2)

    def backward(g: np.ndarray):
        gp = np.zeros_like(padded)
        for k, (di, dj) in enumerate(offsets):
            gp[di:di + h, dj:dj + w, :] += g[:, :, k * d:(k + 1) * d]
        return (gp[r:r + h, r:r + w, :],)

    return _node(out, (x,), backward, "unfold")


def conv2d_same(x: Tensor, w: Tensor, b: Optional[Tensor], kernel: int) -> Tensor:
    """k x k convolution with zero padding; ``w`` has shape ``[k*k*Din, Dout]``."""
    return conv_1x1(unfold_patches(x, kernel), w, b)


def attended_sum(a: Tensor, x: Tensor) -> Tensor:
    """``out[d] = sum_{h,w} a[h, w] * x[h, w, d]``."""
    if a.ndim != 2 or x.ndim != 3 or a.shape != x.shape[:2]:
        raise ShapeError(f"attended_sum: attention {a.shape} does not match features {x.shape}")
    out = np.tensordot(a.data, x.data, axes=([0, 1], [0, 1]))

    def backward(g: np.ndarray):
        return x.data @ g, a.data[:, :, None] * g[None, None, :]

    return _node(out, (a, x), backward, "attended_sum")


def shift_1d(p: Tensor, direction: str) -> Tensor:
    """Shift a vector one slot with zero fill.

    ``up``: ``out[i] = p[i-1]`` (mass at the last slot falls off);
    ``down``: ``out[i] = p[i+1]`` (mass at slot 0 falls off).
    """
    if p.ndim != 1 or p.shape[0] < 1:
        raise ShapeError(f"shift_1d expects a non-empty vector, got {p.shape}")
    out = np.zeros_like(p.data)
    if direction == "up":
        out[1:] = p.data[:-1]

        def backward(g: np.ndarray):
            gp = np.zeros_like(g)
            gp[:-1] = g[1:]
            return (gp,)
    elif direction == "down":
        out[:-1] = p.data[1:]

        def backward(g: np.ndarray):
            gp = np.zeros_like(g)
            gp[1:] = g[:-1]
            return (gp,)
    else:
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    return _node(out, (p,), backward, f"shift_{direction}")


# -- normalisation and losses -----------------------------------------------
def _check_softmax_input(v: Tensor, axis: int) -> np.ndarray:
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis (shape {v.shape})")
    top = v.data.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(top)):
        raise NumericalError("softmax over all -inf entries")
    return top


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    top = _check_softmax_input(v, axis)
    e = np.exp(v.data - top)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (v,), backward, "softmax")


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    top = _check_softmax_input(v, axis)
    shifted = v.data - top
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g: np.ndarray):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (v,), backward, "log_softmax")


def smooth_l1(pred: Tensor, target: ArrayLike, beta: float = 1.0) -> Tensor:
    """Summed Huber-style loss: quadratic inside ``|d| < beta``, linear outside."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    inside = np.abs(diff) < beta
    value = np.where(inside, 0.5 * diff * diff / beta, np.abs(diff) - 0.5 * beta).sum()

    def backward(g: np.ndarray):
        local = np.where(inside, diff / beta, np.sign(diff))
        return g * local, -g * local

    return _node(np.asarray(value), (pred, target), backward, "smooth_l1")


def one_hot(index: int, size: int) -> Tensor:
    out = np.zeros(size, dtype=DTYPE)
    out[index] = 1.0
    return Tensor(out)
