"""Dense float64 tensors with reverse-mode autodiff and an Adagrad optimizer.

The design is deliberately small.  A :class:`Tensor` wraps a row-major numpy
array; primitive operations record themselves onto a thread-local tape, and
:func:`backward` replays that tape in exact reverse recording order,
accumulating into per-tensor ``grad`` buffers.  The tape is rebuilt on every
forward pass (define-by-run), which keeps dynamic batch shapes trivial at the
cost of a little bookkeeping per op.

Everything is 64-bit: at desk scale the extra precision is cheaper than
debugging 32-bit gradient-check noise.

Threading: tensors and tapes are single-threaded values.  Disjoint forward
passes may run concurrently on separate threads (each thread gets its own
tape); parameter updates are single-writer.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Iterable, Sequence
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Adagrad",
    "DimensionError",
    "NonFiniteGradientError",
    "Tensor",
    "add",
    "backward",
    "broadcast_to",
    "clip",
    "concat",
    "gather_rows",
    "log",
    "matmul",
    "mul",
    "no_grad",
    "prelu",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "rowwise_matmul",
    "sigmoid",
    "slice_last",
    "softplus",
    "sub",
]


class DimensionError(ValueError):
    """A tensor shape violated an operation's contract."""


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient was NaN or infinite; the whole step was rejected."""

    def __init__(self, param_name: str) -> None:
        super().__init__(
            f"non-finite gradient for parameter {param_name!r}; update step rejected"
        )
        self.param_name = param_name


class Tensor:
    """A dense float64 array with an optional same-shape gradient buffer.

    ``grad`` exists exactly when ``requires_grad`` is true, and is kept zeroed
    until :func:`backward` accumulates into it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(
                f"item() needs a single-element tensor, got shape {self.data.shape}"
            )
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; scalars are treated as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeEntry:
    op: str
    output: Tensor
    vjp: Callable[[np.ndarray], None]


class _ThreadState(threading.local):
    def __init__(self) -> None:
        self.tape: list[TapeEntry] = []
        self.grad_enabled: bool = True


_STATE = _ThreadState()


@contextmanager
def no_grad():
    """Disable tape recording within the block (outputs carry no grad)."""
    previous = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


def _track(inputs: Sequence[Tensor]) -> bool:
    return _STATE.grad_enabled and any(t.requires_grad for t in inputs)


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray,
          vjp: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, requires_grad=_track(inputs))
    if out.requires_grad:
        _STATE.tape.append(TapeEntry(op, out, vjp))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ"
        )


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with the usual dA = dC·Bᵀ, dB = Aᵀ·dC rules."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul: expected rank-2 operands, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ for shapes {a.data.shape} and {b.data.shape}"
        )

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _emit("matmul", (a, b), a.data @ b.data, vjp)


def add(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _same_shape("add", a, b)

        def vjp(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad += g

        return _emit("add", (a, b), a.data + b.data, vjp)
    if isinstance(b, Tensor):
        a, b = b, a
    c = float(b)

    def vjp_const(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g

    return _emit("add", (a,), a.data + c, vjp_const)


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _same_shape("sub", a, b)

        def vjp(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad -= g

        return _emit("sub", (a, b), a.data - b.data, vjp)
    if isinstance(a, Tensor):
        c = float(b)

        def vjp_right(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g

        return _emit("sub", (a,), a.data - c, vjp_right)
    c = float(a)
    t: Tensor = b

    def vjp_left(g: np.ndarray) -> None:
        if t.requires_grad:
            t.grad -= g

    return _emit("sub", (t,), c - t.data, vjp_left)


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _same_shape("mul", a, b)

        def vjp(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g * b.data
            if b.requires_grad:
                b.grad += g * a.data

        return _emit("mul", (a, b), a.data * b.data, vjp)
    if isinstance(b, Tensor):
        a, b = b, a
    c = float(b)

    def vjp_const(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * c

    return _emit("mul", (a,), a.data * c, vjp_const)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # Piecewise form avoids exp overflow for large negative inputs.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * y * (1.0 - y)

    return _emit("sigmoid", (a,), y, vjp)


def relu(a: Tensor) -> Tensor:
    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * (a.data > 0)

    return _emit("relu", (a,), np.maximum(a.data, 0.0), vjp)


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with a single learnable slope for the negative side."""
    if slope.size != 1:
        raise DimensionError(f"prelu: slope must be a scalar, got shape {slope.shape}")
    s = float(slope.data.reshape(()))
    if not np.isfinite(s):
        raise ValueError("prelu: slope must be finite")
    neg = a.data <= 0

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * np.where(neg, s, 1.0)
        if slope.requires_grad:
            slope.grad += np.sum(g * a.data * neg)

    return _emit("prelu", (a, slope), np.where(neg, s * a.data, a.data), vjp)


def log(a: Tensor) -> Tensor:
    """Natural logarithm; the input must be strictly positive."""
    if a.data.size and a.data.min() <= 0.0:
        raise ValueError("log: input must be strictly positive")

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g / a.data

    return _emit("log", (a,), np.log(a.data), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi]; gradients pass through inside the range."""
    if not lo < hi:
        raise ValueError(f"clip: empty range [{lo}, {hi}]")
    inside = (a.data >= lo) & (a.data <= hi)

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * inside

    return _emit("clip", (a,), np.clip(a.data, lo, hi), vjp)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow; gradient is sigmoid(x)."""
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * _stable_sigmoid(x)

    return _emit("softplus", (a,), y, vjp)


def _check_axis(op: str, t: Tensor, axis: int) -> int:
    rank = t.data.ndim
    if not -rank <= axis < rank:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {rank}")
    return axis % rank


def reduce_sum(a: Tensor, axis: int) -> Tensor:
    axis = _check_axis("reduce_sum", a, axis)

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += np.expand_dims(g, axis)

    return _emit("reduce_sum", (a,), a.data.sum(axis=axis), vjp)


def reduce_mean(a: Tensor, axis: int) -> Tensor:
    axis = _check_axis("reduce_mean", a, axis)
    n = a.data.shape[axis]

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += np.expand_dims(g, axis) / n

    return _emit("reduce_mean", (a,), a.data.mean(axis=axis), vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise DimensionError("concat: need at least one tensor")
    axis = _check_axis("concat", parts[0], axis)
    rank = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != rank:
            raise DimensionError(
                f"concat: rank mismatch between shapes {parts[0].data.shape} and {p.data.shape}"
            )
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: np.ndarray) -> None:
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * rank
                index[axis] = slice(start, stop)
                p.grad += g[tuple(index)]

    return _emit("concat", tuple(parts), data, vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.data.shape} as {shape}") from exc

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g.reshape(a.data.shape)

    return _emit("reshape", (a,), data, vjp)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; the gradient sums back over the expanded axes."""
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(
            f"broadcast_to: cannot expand {a.data.shape} to {shape}"
        ) from exc

    def vjp(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        reduced = g
        while reduced.ndim > a.data.ndim:
            reduced = reduced.sum(axis=0)
        for i, (have, want) in enumerate(zip(reduced.shape, a.data.shape)):
            if want == 1 and have != 1:
                reduced = reduced.sum(axis=i, keepdims=True)
        a.grad += reduced

    return _emit("broadcast_to", (a,), data, vjp)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the final axis."""
    width = a.data.shape[-1]
    if not 0 <= start <= stop <= width:
        raise DimensionError(
            f"slice_last: range [{start}, {stop}) invalid for last axis of {a.data.shape}"
        )

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad[..., start:stop] += g

    return _emit("slice_last", (a,), a.data[..., start:stop].copy(), vjp)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into a 2-D table; gradients scatter-add back by row id."""
    if table.data.ndim != 2:
        raise DimensionError(f"gather_rows: table must be rank 2, got {table.data.shape}")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("gather_rows: ids must be integers")
    rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise DimensionError(
            f"gather_rows: id out of range for table with {rows} rows"
        )

    def vjp(g: np.ndarray) -> None:
        if table.requires_grad:
            np.add.at(table.grad, ids, g)

    return _emit("gather_rows", (table,), table.data[ids], vjp)


def rowwise_matmul(h: Tensor, w: Tensor) -> Tensor:
    """Per-row matrix product: out[b] = h[b] @ w[b].

    ``h`` is (B, n) and ``w`` is (B, n, m); each batch row carries its own
    weight matrix (the shape generated networks produce).
    """
    if h.data.ndim != 2 or w.data.ndim != 3 or h.data.shape[0] != w.data.shape[0] \
            or h.data.shape[1] != w.data.shape[1]:
        raise DimensionError(
            f"rowwise_matmul: incompatible shapes {h.data.shape} and {w.data.shape}"
        )
    data = np.einsum("bn,bnm->bm", h.data, w.data)

    def vjp(g: np.ndarray) -> None:
        if h.requires_grad:
            h.grad += np.einsum("bm,bnm->bn", g, w.data)
        if w.requires_grad:
            w.grad += np.einsum("bn,bm->bnm", h.data, g)

    return _emit("rowwise_matmul", (h, w), data, vjp)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Seed d(loss) = 1 and replay the tape in reverse recording order.

    The tape is cleared afterwards.  A constant loss (nothing recorded
    against it) is a no-op: gradients simply stay zero.
    """
    if loss.size != 1:
        raise DimensionError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = _STATE.tape
    try:
        if loss.requires_grad:
            loss.grad += 1.0
            for entry in reversed(tape):
                entry.vjp(entry.output.grad)
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adagrad:
    """Adagrad: acc += g²; p −= lr · g / (√acc + ε).

    All gradients are checked for finiteness before any parameter is touched,
    so a bad batch rejects the whole step instead of corrupting half the
    model.
    """

    def __init__(self, params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
                 lr: float = 0.01, eps: float = 1e-8) -> None:
        self.params = dict(params)
        for name, p in self.params.items():
            if not p.requires_grad:
                raise ValueError(f"parameter {name!r} does not require gradients")
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        if not eps > 0:
            raise ValueError("epsilon must be positive")
        self.lr = float(lr)
        self.eps = float(eps)
        self.accum = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(name)
        for name, p in self.params.items():
            g = p.grad
            acc = self.accum[name]
            acc += g * g
            p.data -= self.lr * g / (np.sqrt(acc) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0
