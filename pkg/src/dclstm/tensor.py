"""Dense tensors.

Tensors are plain numpy arrays in row-major order with channels last
(``[H, W, C]`` images, ``[T, H, W, C]`` videos).  This module adds the
shape validation and finiteness checks the rest of the library relies on.
"""

import os
from math import prod
from typing import Sequence

import numpy as np

DTYPE = np.float32

# Finiteness assertions are on unless DCLSTM_CHECK_FINITE=0.
CHECK_FINITE = os.environ.get("DCLSTM_CHECK_FINITE", "1") != "0"

_INDEX_MAX = np.iinfo(np.intp).max


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def validate_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) < 1:
        raise ShapeError("rank must be at least 1")
    if any(d < 1 for d in shape):
        raise ShapeError(f"every extent must be >= 1, got {shape}")
    n = 1
    for d in shape:
        n *= d
        if n > _INDEX_MAX:
            raise OverflowError(f"element count of {shape} overflows the index type")
    return shape


def numel(shape: Sequence[int]) -> int:
    return prod(validate_shape(shape))


def strides(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides (last axis fastest)."""
    shape = validate_shape(shape)
    out = [1] * len(shape)
    for k in range(len(shape) - 2, -1, -1):
        out[k] = out[k + 1] * shape[k + 1]
    return tuple(out)


def flat_index(coord: Sequence[int], shape: Sequence[int]) -> int:
    if len(coord) != len(shape):
        raise ShapeError("coordinate rank does not match shape")
    for i, d in zip(coord, shape):
        if not 0 <= i < d:
            raise IndexError(f"coordinate {tuple(coord)} out of range for {tuple(shape)}")
    return sum(i * s for i, s in zip(coord, strides(shape)))


def unflatten_index(index: int, shape: Sequence[int]) -> tuple[int, ...]:
    coord = []
    for s in strides(shape):
        q, index = divmod(index, s)
        coord.append(q)
    return tuple(coord)


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if CHECK_FINITE and not np.isfinite(a).all():
        raise NonFiniteError(f"non-finite values produced by {what}")
    return a


def as_tensor(a, dtype=None) -> np.ndarray:
    return np.asarray(a, dtype=dtype if dtype is not None else DTYPE)


def zeros(shape: Sequence[int], dtype=DTYPE) -> np.ndarray:
    return np.zeros(validate_shape(shape), dtype=dtype)


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def elementwise(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return check_finite(fn(a, b), op)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def map(op: str, a: np.ndarray, k: float | None = None) -> np.ndarray:
    """Entrywise ``sigmoid``, ``tanh``, ``relu`` or ``scale`` (by ``k``)."""
    a = np.asarray(a)
    if op == "sigmoid":
        out = sigmoid(a)
    elif op == "tanh":
        out = np.tanh(a)
    elif op == "relu":
        out = relu(a)
    elif op == "scale":
        if k is None:
            raise ValueError("scale needs a factor k")
        out = a * a.dtype.type(k)
    else:
        raise ValueError(f"unknown map op {op!r}")
    return check_finite(out, op)


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"invalid axis {ax} for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axes {tuple(axes)}")
    return tuple(out)


def reduce_mean(a: np.ndarray, axes=None) -> np.ndarray:
    a = np.asarray(a)
    ax = _normalize_axes(axes, a.ndim)
    return check_finite(np.mean(a, axis=ax, dtype=a.dtype), "reduce_mean")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return check_finite(a @ b, "matmul")
