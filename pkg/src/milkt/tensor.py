"""Dense 2-D arrays with tape-based reverse-mode differentiation.

A :class:`Tape` owns every :class:`Node` created during one forward pass.
Creation order is a topological order, so :func:`backward` is a single
reverse sweep over the tape. There is no broadcasting: bias rows are added
with :func:`add_row` and scalar products go through :func:`matmul` with a
1x1 operand.

Parameters live outside the tape as plain ``float64`` arrays and are bound
per pass with :meth:`Tape.param`; binding the same array twice returns the
same leaf, so shared weights accumulate gradient from every use.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Matrix = np.ndarray
BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

# Ops whose backward is deliberately corrupted; only touched by the
# gradcheck fault-injection path.
_FAULTY_OPS: set[str] = set()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operand lies outside the domain of the operation."""


def as_matrix(x) -> Matrix:
    """Coerce ``x`` into a contiguous 2-D float64 array."""
    arr = np.array(x, dtype=np.float64, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Node:
    __slots__ = ("value", "_grad", "op", "parents", "requires_grad", "tape", "index", "_backward", "name")

    def __init__(self, tape: "Tape", value: Matrix, op: str, parents: tuple["Node", ...],
                 requires_grad: bool, backward_fn: BackwardFn | None = None, name: str | None = None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._backward = backward_fn
        self._grad: Matrix | None = None
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> Matrix:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: Matrix) -> None:
        self._grad = g

    @property
    def provenance(self) -> tuple[str, tuple[int, ...]]:
        return self.op, tuple(p.index for p in self.parents)

    def __repr__(self) -> str:
        return f"Node(#{self.index} {self.op} {self.shape[0]}x{self.shape[1]})"


class Tape:
    """Ordered record of the nodes of one computation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._bound: dict[int, tuple[Matrix, Node]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def constant(self, value, name: str | None = None) -> Node:
        return Node(self, as_matrix(value), "const", (), False, name=name)

    def param(self, array: Matrix, name: str | None = None) -> Node:
        """Bind a parameter array as a gradient-tracked leaf (no copy)."""
        hit = self._bound.get(id(array))
        if hit is not None and hit[0] is array:
            return hit[1]
        if array.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D, got {array.shape}")
        node = Node(self, array, "param", (), True, name=name)
        self._bound[id(array)] = (array, node)
        return node

    def grad_of(self, array: Matrix) -> Matrix:
        """Accumulated gradient of a bound parameter (zeros if never bound)."""
        hit = self._bound.get(id(array))
        if hit is None or hit[0] is not array:
            return np.zeros_like(array)
        return hit[1].grad

    def zero_grad(self) -> None:
        for node in self.nodes:
            node._grad = None

    def provenance(self) -> list[tuple[str, tuple[int, ...]]]:
        return [n.provenance for n in self.nodes]


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _result(op: str, value: Matrix, parents: tuple[Node, ...], backward_fn: BackwardFn) -> Node:
    tape = _tape_of(*parents)
    req = any(p.requires_grad for p in parents)
    return Node(tape, value, op, parents, req, backward_fn if req else None)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def detach(a: Node) -> Node:
    """Constant copy of ``a`` on the same tape; gradients stop here."""
    return Node(a.tape, a.value, "detach", (), False)


# --------------------------------------------------------------------- linear


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        if "matmul" in _FAULTY_OPS and ga is not None:
            ga = ga * 1.5
        return ga, gb

    return _result("matmul", av @ bv, (a, b), back)


def transpose(a: Node) -> Node:
    return _result("transpose", np.ascontiguousarray(a.value.T), (a,), lambda g: (g.T,))


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _result("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return _result("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def add_row(a: Node, row: Node) -> Node:
    """Add a 1 x c row to every row of an r x c matrix."""
    if row.shape[0] != 1 or row.shape[1] != a.shape[1]:
        raise ShapeError(f"add_row: cannot add row {row.shape} to {a.shape}")
    return _result("add_row", a.value + row.value, (a, row),
                   lambda g: (g, g.sum(axis=0, keepdims=True)))


def hadamard(a: Node, b: Node) -> Node:
    _same_shape("hadamard", a, b)
    av, bv = a.value, b.value
    return _result("hadamard", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale_const(a: Node, c: float) -> Node:
    c = float(c)
    return _result("scale_const", a.value * c, (a,), lambda g: (g * c,))


def sum_all(a: Node) -> Node:
    shape = a.shape
    return _result("sum_all", np.array([[a.value.sum()]]), (a,),
                   lambda g: (np.full(shape, g[0, 0]),))


def concat_rows(nodes: Sequence[Node]) -> Node:
    """Stack 1 x d rows into an m x d matrix."""
    if not nodes:
        raise ShapeError("concat_rows: empty input")
    d = nodes[0].shape[1]
    for i, n in enumerate(nodes):
        if n.shape != (1, d):
            raise ShapeError(f"concat_rows: input {i} has shape {n.shape}, expected (1, {d})")
    value = np.concatenate([n.value for n in nodes], axis=0)
    return _result("concat_rows", value, tuple(nodes),
                   lambda g: tuple(g[i:i + 1] for i in range(len(nodes))))


# ---------------------------------------------------------------- elementwise


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)

    def back(g):
        out = g * (1.0 - y * y)
        return (out * 0.5 if "tanh" in _FAULTY_OPS else out,)

    return _result("tanh", y, (a,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Node) -> Node:
    y = _sigmoid(a.value)
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _result("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def abs_(a: Node) -> Node:
    s = np.sign(a.value)
    return _result("abs", np.abs(a.value), (a,), lambda g: (g * s,))


def sign(a: Node) -> Node:
    """Elementwise sign; treated as piecewise constant (zero gradient)."""
    return _result("sign", np.sign(a.value), (a,), lambda g: (np.zeros_like(g),))


def pow_const(a: Node, p: float) -> Node:
    """``a ** p`` elementwise; non-integer ``p`` requires a non-negative base."""
    p = float(p)
    x = a.value
    if not float(p).is_integer() and np.any(x < 0):
        raise DomainError(f"pow_const: negative base with non-integer exponent {p}")
    y = np.power(x, p)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x, p - 1.0)
        # the derivative of x**p at 0 for p < 1 is unbounded; use 0 there
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return _result("pow_const", y, (a,), back)


def dropout(a: Node, rate: float, train: bool, rng: np.random.Generator | None) -> Node:
    """Inverted dropout. The exact identity (same node) when not training."""
    if not train or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result("dropout", a.value * keep, (a,), lambda g: (g * keep,))


def softmax_row(a: Node) -> Node:
    """Row-wise softmax with max subtraction."""
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result("softmax_row", y, (a,), back)


# --------------------------------------------------------------------- losses


def rss_loss(a: Node, b: Node) -> Node:
    """Residual sum of squares, sum over all elements (not the mean)."""
    _same_shape("rss_loss", a, b)
    diff = a.value - b.value

    def back(g):
        gd = 2.0 * g[0, 0] * diff
        return gd, -gd

    return _result("rss_loss", np.array([[np.sum(diff * diff)]]), (a, b), back)


CE_EPS = 1e-12


def cross_entropy_loss(p: Node, y: int) -> Node:
    """``-ln(max(p[y], eps))`` for a 1 x c probability row."""
    if p.shape[0] != 1:
        raise ShapeError(f"cross_entropy_loss: expected a 1 x c row, got {p.shape}")
    c = p.shape[1]
    if not 0 <= int(y) < c:
        raise IndexError(f"class index {y} out of range for {c} classes")
    y = int(y)
    py = p.value[0, y]
    clamped = py < CE_EPS

    def back(g):
        gp = np.zeros_like(p.value)
        if not clamped:
            gp[0, y] = -g[0, 0] / py
        return (gp,)

    return _result("cross_entropy", np.array([[-np.log(max(py, CE_EPS))]]), (p,), back)


# ------------------------------------------------------------------- backward


def backward(tape: Tape, loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``node.grad`` for every tracked node.

    Gradients are added to whatever ``grad`` already holds; call
    :meth:`Tape.zero_grad` between independent passes.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("loss does not belong to this tape")
    pending: dict[int, np.ndarray] = {loss.index: np.ones((1, 1))}
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = pending.pop(node.index, None)
        if g is None or not node.requires_grad:
            continue
        # never mutated in place, so aliasing an upstream array is safe
        node._grad = g if node._grad is None else node._grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.index)
            pending[parent.index] = pg if prev is None else prev + pg


def finite_difference_gradient(f: Callable[[Matrix], float], x: Matrix, h: float = 1e-5,
                               coords: Iterable[tuple[int, int]] | None = None) -> Matrix:
    """Central-difference gradient of a scalar function of a matrix.

    ``coords`` restricts evaluation to the listed entries; the rest of the
    returned matrix is NaN.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    if coords is None:
        grad = np.zeros_like(x)
        coords = np.ndindex(*x.shape)
    else:
        grad = np.full_like(x, np.nan)
    for idx in coords:
        orig = x[idx]
        x[idx] = orig + h
        fp = float(f(x))
        x[idx] = orig - h
        fm = float(f(x))
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)`` over finite entries."""
    mask = np.isfinite(numeric)
    a, n = analytic[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
