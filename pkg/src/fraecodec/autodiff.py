"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

Define-by-run: while a :class:`Tape` is active (used as a context manager),
every operation is recorded so that a single reverse sweep accumulates
gradients. Outside any active tape the same operations compute values only,
which keeps inference paths free of graph overhead.

A tape and the tensors recorded on it belong to one thread of execution;
independent model replicas on other threads use their own tapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "OP_KINDS",
    "ShapeError",
    "Tensor",
    "Tape",
    "active_tape",
    "accumulate_grad",
    "backward",
    "forward_op",
    "matmul",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "softmax",
    "log",
    "exp",
    "concat",
    "slice_",
    "sum_",
    "mse",
    "mean",
]

OP_KINDS = (
    "matmul",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "softmax",
    "log",
    "exp",
    "concat",
    "slice",
    "sum",
    "mse",
)


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class Tensor:
    """Dense row-major float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


_LOCAL = threading.local()


def _stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    """The innermost tape on this thread, or None when nothing records."""
    stack = _stack()
    return stack[-1] if stack else None


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add `g` into the gradient slot of `t`, allocating it on first use."""
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


class Tape:
    """Ordered record of the operations of one forward pass.

    Records are appended in execution order, which is a topological order of
    the data flow; the backward sweep visits each record exactly once, in
    reverse. Tapes are rebuilt per forward pass, so unroll lengths may vary
    freely between passes.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited a non-innermost tape")
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, pull: Callable[[np.ndarray], None]) -> None:
        """Register `pull`, which maps the output gradient onto the inputs.

        Exposed so composite modules can install custom backward rules
        (e.g. straight-through quantization).
        """
        self._records.append((out, pull))

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into every leaf tensor's grad.

        Gradients of tensors produced on this tape are recomputed from
        scratch each call, while leaf gradients accumulate across calls, so
        two sweeps from two roots leave the sum of their individual
        gradients on the leaves.
        """
        if root.data.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
        for out, _ in self._records:
            out.grad = None
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        else:
            root.grad = root.grad + np.ones_like(root.data)
        for out, pull in reversed(self._records):
            if out.grad is not None:
                pull(out.grad)


def backward(tape: Tape, root: Tensor) -> None:
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(root)


def _record(out: Tensor, pull: Callable[[np.ndarray], None]) -> None:
    tape = active_tape()
    if tape is not None:
        tape.record(out, pull)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    a_data, b_data = a.data, b.data
    out = Tensor(a_data @ b_data)

    def pull(g: np.ndarray) -> None:
        accumulate_grad(a, g @ b_data.T)
        accumulate_grad(b, a_data.T @ g)

    _record(out, pull)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also admits matrix + bias-vector (the only broadcast)."""
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)

        def pull(g: np.ndarray) -> None:
            accumulate_grad(a, g)
            accumulate_grad(b, g)

    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        out = Tensor(a.data + b.data)

        def pull(g: np.ndarray) -> None:
            accumulate_grad(a, g)
            accumulate_grad(b, g.sum(axis=0))

    else:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")
    _record(out, pull)
    return out


def mul(a: Tensor, b: "Tensor | float") -> Tensor:
    """Elementwise product; `b` may be a plain number (constant scale)."""
    if isinstance(b, (int, float)):
        s = float(b)
        out = Tensor(a.data * s)

        def pull(g: np.ndarray) -> None:
            accumulate_grad(a, g * s)

    else:
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not conform")
        a_data, b_data = a.data, b.data
        out = Tensor(a_data * b_data)

        def pull(g: np.ndarray) -> None:
            accumulate_grad(a, g * b_data)
            accumulate_grad(b, g * a_data)

    _record(out, pull)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)

    def pull(g: np.ndarray) -> None:
        accumulate_grad(x, g * (1.0 - y * y))

    _record(out, pull)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)

    def pull(g: np.ndarray) -> None:
        accumulate_grad(x, g * y * (1.0 - y))

    _record(out, pull)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def pull(g: np.ndarray) -> None:
        inner = (g * y).sum(axis=axis, keepdims=True)
        accumulate_grad(x, y * (g - inner))

    _record(out, pull)
    return out


def log(x: Tensor) -> Tensor:
    x_data = x.data
    out = Tensor(np.log(x_data))

    def pull(g: np.ndarray) -> None:
        accumulate_grad(x, g / x_data)

    _record(out, pull)
    return out


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)

    def pull(g: np.ndarray) -> None:
        accumulate_grad(x, g * y)

    _record(out, pull)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    ndim = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise ShapeError(
                f"concat: ranks differ ({[q.shape for q in parts]})"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def pull(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            sl = [np.s_[:]] * ndim
            sl[axis] = np.s_[lo:hi]
            accumulate_grad(p, g[tuple(sl)])

    _record(out, pull)
    return out


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slab `start:stop` of `x` along `axis`."""
    dim = x.shape[axis]
    if not (0 <= start < stop <= dim):
        raise ShapeError(f"slice: bounds [{start}, {stop}) invalid for axis of size {dim}")
    sl = [np.s_[:]] * x.data.ndim
    sl[axis] = np.s_[start:stop]
    key = tuple(sl)
    out = Tensor(x.data[key].copy())

    def pull(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[key] = g
        accumulate_grad(x, gx)

    _record(out, pull)
    return out


def sum_(x: Tensor) -> Tensor:
    """Full reduction to a scalar."""
    out = Tensor(x.data.sum())
    shape = x.shape

    def pull(g: np.ndarray) -> None:
        accumulate_grad(x, np.full(shape, float(g)))

    _record(out, pull)
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements, as a scalar."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} do not conform")
    diff = a.data - b.data
    n = diff.size
    out = Tensor((diff * diff).sum() / n)

    def pull(g: np.ndarray) -> None:
        k = 2.0 * float(g) / n
        accumulate_grad(a, k * diff)
        accumulate_grad(b, -k * diff)

    _record(out, pull)
    return out


def mean(x: Tensor) -> Tensor:
    """Mean over all elements (composition of sum and a constant scale)."""
    return mul(sum_(x), 1.0 / x.data.size)


_DISPATCH = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "concat": concat,
    "slice": slice_,
    "sum": sum_,
    "mse": mse,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name; see OP_KINDS for the valid kinds."""
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
