"""Define-by-run reverse-mode automatic differentiation.

Operations executed while a :class:`Tape` is active are recorded if any
input requires a gradient.  :func:`backward` then replays the tape in
reverse, accumulating gradients by addition into every participating
:class:`Variable`.

    >>> x = Variable(np.array([2.0, -3.0]), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(x * x)
    >>> backward(tape, loss)
    >>> x.grad
    array([ 4., -6.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T


class GraphError(RuntimeError):
    pass


class Variable:
    __slots__ = ("value", "grad", "requires_grad", "node_id", "name", "_tape")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        if isinstance(value, Variable):
            value = value.value
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(T.DTYPE)
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, dtype={self.dtype})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


@dataclass
class Node:
    inputs: tuple[Variable, ...]
    output: Variable
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of operations; rebuilt for every forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def as_variable(x, dtype=None) -> Variable:
    if isinstance(x, Variable):
        return x
    return Variable(np.asarray(x, dtype=dtype))


def apply(value: np.ndarray, inputs: Sequence[Variable], backward_fn, name: str = "op") -> Variable:
    """Wrap a forward result and record its backward rule on the active tape.

    ``backward_fn(g)`` receives the gradient of the output and returns one
    gradient (or ``None``) per input, in order.
    """
    T.check_finite(value, name)
    out = Variable(value)
    tape = current_tape()
    if tape is not None and any(v.requires_grad for v in inputs):
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        out._tape = tape
        tape.nodes.append(Node(tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Variable) -> None:
    """Populate ``.grad`` on every variable that ``loss`` depends on."""
    if loss.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is not tape or loss.node_id is None:
        raise GraphError("loss was not recorded on this tape")
    seed = np.ones_like(loss.value)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise GraphError(f"gradient shape {gi.shape} != value shape {inp.shape}")
            gi = gi.astype(inp.dtype, copy=False)
            inp.grad = gi if inp.grad is None else inp.grad + gi


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, evaluated in float64."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b) -> float:
    """Largest elementwise ``|a-b| / max(1e-8, |a|+|b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


# -- elementwise ops ---------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(k for k, d in enumerate(shape) if d == 1 and g.shape[k] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    a = as_variable(a)
    b = as_variable(b, dtype=a.dtype)
    return a, b


def add(a, b) -> Variable:
    a, b = _pair(a, b)
    return apply(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Variable:
    a, b = _pair(a, b)
    return apply(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Variable:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return apply(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * av, b.shape) if b.requires_grad else None),
                 "mul")


def maximum(a, b) -> Variable:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.value >= b.value
    return apply(np.maximum(a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape),
                            _unbroadcast(g * ~pick_a, b.shape)), "max")


def scale(a, k: float) -> Variable:
    a = as_variable(a)
    k = a.dtype.type(k)
    return apply(a.value * k, (a,), lambda g: (g * k,), "scale")


# Slopes are computed from the input: s(1-s) and 1-t^2 cancel badly in
# float32 once the output is close to saturation.
def _sigmoid_slope(x):
    e = np.exp(-np.abs(x))
    return e / ((1 + e) * (1 + e))


def _tanh_slope(x):
    e = np.exp(-2 * np.abs(x))
    return 4 * e / ((1 + e) * (1 + e))


def sigmoid(a) -> Variable:
    a = as_variable(a)
    return apply(T.sigmoid(a.value), (a,), lambda g: (g * _sigmoid_slope(a.value),), "sigmoid")


def tanh(a) -> Variable:
    a = as_variable(a)
    return apply(np.tanh(a.value), (a,), lambda g: (g * _tanh_slope(a.value),), "tanh")


def relu(a) -> Variable:
    # Subgradient at 0 is 0.
    a = as_variable(a)
    mask = a.value > 0
    return apply(a.value * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions and linear algebra --------------------------------------------


def sum_all(a) -> Variable:
    a = as_variable(a)
    total = np.sum(a.value, dtype=a.dtype).reshape(1)
    return apply(total, (a,), lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),), "sum")


def mean(a, axes=None) -> Variable:
    """Arithmetic mean over ``axes`` (all axes when ``None``); reduced axes are dropped.

    Reducing every axis yields shape ``(1,)`` so the result can serve as a loss.
    """
    a = as_variable(a)
    ax = T._normalize_axes(axes, a.value.ndim)
    count = int(np.prod([a.shape[k] for k in ax]))
    value = np.mean(a.value, axis=ax, dtype=a.dtype)
    if value.ndim == 0:
        value = value.reshape(1)
    kept = tuple(1 if k in ax else d for k, d in enumerate(a.shape))

    def back(g):
        return (np.broadcast_to(g.reshape(kept) / a.dtype.type(count), a.shape).copy(),)

    return apply(value, (a,), back, "mean")


def matmul(a, b) -> Variable:
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise T.ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return apply(av @ bv, (a, b),
                 lambda g: (g @ bv.T if a.requires_grad else None,
                            av.T @ g if b.requires_grad else None), "matmul")


# -- shape ops -----------------------------------------------------------------


def reshape(a, shape) -> Variable:
    a = as_variable(a)
    return apply(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index) -> Variable:
    """Basic (non-fancy) indexing, e.g. ``take(x, 3)`` or ``take(x, (..., slice(0, 4)))``."""
    a = as_variable(a)
    value = a.value[index]

    def back(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return (full,)

    return apply(np.ascontiguousarray(value), (a,), back, "take")


def concat(parts: Sequence, axis: int = -1) -> Variable:
    parts = [as_variable(p) for p in parts]
    value = np.concatenate([p.value for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis)
                     for k in range(len(parts)))

    return apply(value, parts, back, "concat")


def stack(parts: Sequence, axis: int = 0) -> Variable:
    parts = [as_variable(p) for p in parts]
    value = np.stack([p.value for p in parts], axis=axis)

    def back(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(parts)))

    return apply(value, parts, back, "stack")
