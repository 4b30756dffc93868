"""Differentiable LIFO stack of flattened attention maps.

The pointer ``p`` is a soft one-hot over the ``L`` rows.  Push moves the
pointer up one row and writes the new map where it lands; pop reads the
pointer-weighted row and moves the pointer down.  Rows are never erased.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ShapeError, SimplexError, StackOverflowError, StackUnderflowError
from .tensor import Tensor

BOUND_TOL = 1e-6
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class MemoryStack:
    values: Tensor
    pointer: Tensor
    strict_bounds: bool = False

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ShapeError(f"stack values must be [L, H*W], got {self.values.shape}")
        if self.pointer.shape != (self.values.shape[0],):
            raise ShapeError(f"pointer shape {self.pointer.shape} does not match depth {self.values.shape[0]}")

    @property
    def depth(self) -> int:
        return self.values.shape[0]

    @property
    def map_size(self) -> int:
        return self.values.shape[1]

    def with_bounds(self, strict: bool) -> "MemoryStack":
        return MemoryStack(self.values, self.pointer, strict)


def push(stack: MemoryStack, z: Tensor) -> MemoryStack:
    if z.shape != (stack.map_size,):
        raise ShapeError(f"pushed map has shape {z.shape}, stack holds maps of size {stack.map_size}")
    p = T.shift_1d(stack.pointer, "up")
    if stack.strict_bounds and float(p.data.sum()) < 1.0 - BOUND_TOL:
        raise StackOverflowError(f"push past the top of a depth-{stack.depth} stack")
    col = p.reshape(stack.depth, 1)
    values = stack.values * (1.0 - col) + z.reshape(1, stack.map_size) * col
    return MemoryStack(values, p, stack.strict_bounds)


def pop(stack: MemoryStack) -> Tuple[Tensor, MemoryStack]:
    if stack.strict_bounds and float(stack.pointer.data[0]) > BOUND_TOL:
        raise StackUnderflowError("pop below the bottom of the stack")
    z = read_top(stack)
    p = T.shift_1d(stack.pointer, "down")
    return z, MemoryStack(stack.values, p, stack.strict_bounds)


def read_top(stack: MemoryStack) -> Tensor:
    """Pointer-weighted row read, leaving the stack untouched."""
    return stack.pointer @ stack.values


def _check_simplex(weights: Tensor) -> None:
    w = weights.data
    if w.ndim != 1:
        raise ShapeError(f"mixture weights must be a vector, got {w.shape}")
    if np.any(w < -SIMPLEX_TOL) or abs(float(w.sum()) - 1.0) > SIMPLEX_TOL:
        raise SimplexError(f"mixture weights must be nonnegative and sum to 1, got sum {float(w.sum()):.8f}")


def combine(stacks: Sequence[MemoryStack], weights: Union[Tensor, np.ndarray]) -> MemoryStack:
    """Convex mixture of candidate stacks; the pointer is mixed but not sharpened."""
    weights = T.as_tensor(weights)
    _check_simplex(weights)
    if len(stacks) != weights.shape[0]:
        raise ShapeError(f"{len(stacks)} stacks but {weights.shape[0]} weights")
    shape = stacks[0].values.shape
    for s in stacks[1:]:
        if s.values.shape != shape:
            raise ShapeError(f"cannot combine stacks of shapes {shape} and {s.values.shape}")
    flat = T.stack([s.values.reshape(-1) for s in stacks])
    values = (weights @ flat).reshape(shape)
    pointer = weights @ T.stack([s.pointer for s in stacks])
    return MemoryStack(values, pointer, stacks[0].strict_bounds)


def sharpen_pointer(p_raw: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scaled = p_raw if temperature == 1.0 else p_raw * (1.0 / temperature)
    return T.softmax(scaled)


def sharpen(stack: MemoryStack, temperature: float = 1.0) -> MemoryStack:
    return MemoryStack(stack.values, sharpen_pointer(stack.pointer, temperature), stack.strict_bounds)
