"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D array. Scalars are 1x1. The only broadcasting allowed
is scalar-with-matrix; bias rows go through :func:`add_row`.

A node records its parents and a closure mapping the output gradient to
one gradient per parent. :meth:`Value.backward` walks the graph in reverse
topological order. Leaf gradients accumulate across calls; interior
gradients are overwritten on each call.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim > 2:
        raise ShapeError(f"only rank <= 2 supported, got shape {a.shape}")
    return a


class Value:
    """A node on the tape: data, grad, and the rule to push grads to parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_matrix(data)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.data.shape != (1, 1):
            raise ValueError(f"backward needs a 1x1 root, got {self.data.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((1, 1))}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _topo_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, parents: Sequence[Value], backward) -> Value:
    out = Value(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def constant(x) -> Value:
    return Value(x, requires_grad=False)


def parameter(x, name: str = "") -> Value:
    return Value(x, requires_grad=True, name=name)


# --- matrix ops -----------------------------------------------------------

def matmul(a, b) -> Value:
    a, b = lift(a), lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _make(A @ B, (a, b), backward)


def linear_map(m, x) -> Value:
    """Left-multiply ``x`` by a constant matrix (dense or scipy.sparse)."""
    x = lift(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"linear_map shape mismatch: {m.shape} @ {x.shape}")
    out = np.asarray(m @ x.data, dtype=np.float64)
    mt = m.T

    def backward(g):
        return (np.asarray(mt @ g, dtype=np.float64),)

    return _make(out, (x,), backward)


def transpose(x) -> Value:
    x = lift(x)
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def hcat(parts: Sequence) -> Value:
    parts = [lift(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"hcat row mismatch: {[p.shape for p in parts]}")
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(parts)))

    return _make(np.hstack([p.data for p in parts]), parts, backward)


def rows(x, index) -> Value:
    """Gather rows; repeated indices accumulate gradient."""
    x = lift(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def backward(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), backward)


def add_row(x, b) -> Value:
    """x (m x n) plus a 1 x n row broadcast down the rows."""
    x, b = lift(x), lift(b)
    if b.shape[0] != 1 or b.shape[1] != x.shape[1]:
        raise ShapeError(f"add_row needs 1x{x.shape[1]} bias, got {b.shape}")
    return _make(x.data + b.data, (x, b),
                 lambda g: (g, g.sum(axis=0, keepdims=True)))


# --- elementwise ----------------------------------------------------------

def _broadcast_pair(a: Value, b: Value) -> None:
    if a.shape == b.shape or a.shape == (1, 1) or b.shape == (1, 1):
        return
    raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.array([[g.sum()]])


def add(a, b) -> Value:
    a, b = lift(a), lift(b)
    _broadcast_pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Value:
    a, b = lift(a), lift(b)
    _broadcast_pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Value:
    a, b = lift(a), lift(b)
    _broadcast_pair(a, b)
    A, B = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * B, a.shape) if a.requires_grad else None,
                _unbroadcast(g * A, b.shape) if b.requires_grad else None)

    return _make(A * B, (a, b), backward)


def exp(x) -> Value:
    x = lift(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Value:
    x = lift(x)
    clamped = np.maximum(x.data, LOG_FLOOR)
    live = x.data >= LOG_FLOOR
    return _make(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),))


def relu(x) -> Value:
    x = lift(x)
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x) -> Value:
    x = lift(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def square(x) -> Value:
    x = lift(x)
    X = x.data
    return _make(X * X, (x,), lambda g: (2.0 * g * X,))


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "exp": exp, "log": log,
    "relu": relu, "sigmoid": sigmoid, "square": square,
}


def elementwise(op: str, *inputs) -> Value:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# --- reductions and row-wise maps ------------------------------------------

def total(x) -> Value:
    x = lift(x)
    shape = x.shape
    return _make(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def mean(x) -> Value:
    x = lift(x)
    return mul(total(x), 1.0 / x.data.size)


def row_sum(x) -> Value:
    x = lift(x)
    n = x.shape[1]
    return _make(x.data.sum(axis=1, keepdims=True), (x,), lambda g: (np.repeat(g, n, axis=1),))


def softmax_rows(x) -> Value:
    x = lift(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), backward)


def log_softmax_rows(x) -> Value:
    x = lift(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), backward)


def l2_normalize_rows(x) -> Value:
    x = lift(x)
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norms <= NORM_FLOOR):
        bad = int(np.argmax(norms.ravel() <= NORM_FLOOR))
        raise DegenerateInputError(f"row {bad} has norm <= {NORM_FLOOR}; cannot normalize")
    y = x.data / norms

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _make(y, (x,), backward)


# --- gradient control ------------------------------------------------------

def detach(x) -> Value:
    """Same data, cut from the tape."""
    return Value(lift(x).data.copy(), requires_grad=False)


def straight_through(x, target) -> Value:
    """Forward ``target`` exactly; backward hands the gradient to ``x`` unchanged.

    Equivalent to ``x + detach(target - x)`` without the rounding of the
    add/subtract round trip.
    """
    x = lift(x)
    t = target.data if isinstance(target, Value) else _as_matrix(target)
    if t.shape != x.shape:
        raise ShapeError(f"straight_through shape mismatch: {x.shape} vs {t.shape}")
    return _make(t.copy(), (x,), lambda g: (g,))
