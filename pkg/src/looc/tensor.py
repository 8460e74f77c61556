"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every primitive below records the
operands it consumed and a closure that maps the output gradient to operand
gradients. :func:`backward` linearises that graph into a :class:`Tape`
(operands strictly before results) and walks it once in reverse.

Only what an MLP classifier and its entropy losses need is provided.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from looc import kernels
from looc.errors import ContractViolation, DimensionError, DomainError

ENTROPY_FLOOR = 1e-12
PROB_SUM_TOL = 1e-5


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        self.data = np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) or data.dtype != dtype else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], back, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = back
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), back, "matmul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(out, (a, b), back, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc
    A, B = a.data, b.data

    def back(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _result(out, (a, b), back, "mul")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at exactly 0 is 0."""
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    X = x.data
    return _result(np.log(X), (x,), lambda g: (g / X,), "log")


def total(x: Tensor) -> Tensor:
    """Sum of every element, as a 0-d tensor."""
    x = _as_tensor(x)
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),), "mean")


def pick(x: Tensor, index) -> Tensor:
    """Row-wise gather ``x[r, index[r]]`` from a 2-D tensor."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"pick expects [b x c] and [b] indices, got {x.shape} and {idx.shape}")
    rows = np.arange(idx.shape[0])
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _result(x.data[rows, idx], (x,), back, "pick")


def take_cols(x: Tensor, cols) -> Tensor:
    """Select a subset of columns from a 2-D tensor."""
    x = _as_tensor(x)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[:, cols] = g
        return (out,)

    return _result(x.data[:, cols], (x,), back, "take_cols")


def softmax_temp(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / temperature`` with max subtraction."""
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_temp expects a [b x c] tensor, got {logits.shape}")
    t = float(temperature)
    p = kernels.softmax_rows(logits.data, t)
    return _result(p, (logits,), lambda g: (kernels.softmax_rows_backward(p, g, t),), "softmax_temp")


def entropy(p: Tensor) -> Tensor:
    """Natural-log entropy of each row; terms with p < 1e-12 count as 0."""
    p = _as_tensor(p)
    if p.data.ndim != 2:
        raise DimensionError(f"entropy expects a [b x c] tensor, got {p.shape}")
    P = p.data
    sums = P.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_SUM_TOL)
    if bad.size or (P < 0).any():
        raise ContractViolation(f"entropy input rows are not probability vectors (rows {bad[:5].tolist()})")
    h = kernels.entropy_rows(P, ENTROPY_FLOOR)
    return _result(h, (p,), lambda g: (kernels.entropy_rows_backward(P, g, ENTROPY_FLOOR),), "entropy")


# ---------------------------------------------------------------------------
# tape


@dataclass
class Tape:
    """Recorded operations in topological order (operands before results)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` of every requires_grad tensor feeding ``loss``.

    Gradients accumulate into ``.grad`` across calls; call ``zero_grad`` on
    the leaves to reset.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape
