"""Minimal reverse-mode differentiation over numpy values.

The recurrent nets in this package are evaluated two ways: untaped (plain
numpy) inside the samplers, and taped for training gradients. To keep the two
paths from ever diverging, the forward code is written once against the free
functions below, which dispatch on their inputs: with no ``Var`` argument they
return a raw numpy value at full speed; with at least one ``Var`` they record
a node carrying the local vector-Jacobian products. ``backward`` replays the
tape in reverse topological order and accumulates ``.grad`` on the leaves.

Values are floats or float64 arrays. Shapes never broadcast except
scalar-against-array, which ``_unbroadcast`` reduces back.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit


class Var:
    """One tape node: a value plus links to the inputs that produced it."""

    __slots__ = ("value", "grad", "parts")
    __array_ufunc__ = None  # keep numpy from consuming us in mixed expressions

    def __init__(self, value, parts=()):
        self.value = value
        self.grad = None
        self.parts = parts  # tuple of (parent Var, vjp callable)

    # arithmetic sugar so generic forward code reads naturally
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var({self.value!r})"


def leaf(value) -> Var:
    return Var(np.asarray(value, dtype=float))


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _shape(x):
    return np.shape(value_of(x))


def _unbroadcast(g, shape):
    if np.shape(g) == shape:
        return g
    if shape == ():
        return float(np.sum(g))
    # scalar was broadcast against an array of `shape`
    return np.broadcast_to(g, shape).copy() if np.shape(g) == () else np.sum(g)


def _make(value, parts):
    parts = tuple(p for p in parts if p is not None)
    if not parts:
        return value
    return Var(value, parts)


def _part(x, fn):
    return (x, fn) if isinstance(x, Var) else None


# -- elementwise arithmetic --------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _make(out, (
        _part(a, lambda g: _unbroadcast(g, _shape(a))),
        _part(b, lambda g: _unbroadcast(g, _shape(b))),
    ))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _make(out, (
        _part(a, lambda g: _unbroadcast(g, _shape(a))),
        _part(b, lambda g: _unbroadcast(-g, _shape(b))),
    ))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _make(out, (
        _part(a, lambda g: _unbroadcast(g * bv, _shape(a))),
        _part(b, lambda g: _unbroadcast(g * av, _shape(b))),
    ))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _make(out, (
        _part(a, lambda g: _unbroadcast(g / bv, _shape(a))),
        _part(b, lambda g: _unbroadcast(-g * out / bv, _shape(b))),
    ))


# -- elementwise nonlinearities ----------------------------------------------

def sigmoid(x):
    out = expit(value_of(x))
    return _make(out, (_part(x, lambda g: g * out * (1.0 - out)),))


def tanh(x):
    out = np.tanh(value_of(x))
    return _make(out, (_part(x, lambda g: g * (1.0 - out * out)),))


def softplus(x):
    """log(1 + e^x), overflow-safe."""
    xv = value_of(x)
    out = np.logaddexp(0.0, xv)
    return _make(out, (_part(x, lambda g: g * expit(xv)),))


def exp(x):
    out = np.exp(value_of(x))
    return _make(out, (_part(x, lambda g: g * out),))


def log(x):
    xv = value_of(x)
    out = np.log(xv)
    return _make(out, (_part(x, lambda g: g / xv),))


# -- linear algebra and structure --------------------------------------------

def mat_vec(m, v):
    mv, vv = value_of(m), value_of(v)
    out = mv @ vv
    return _make(out, (
        _part(m, lambda g: np.outer(g, vv)),
        _part(v, lambda g: mv.T @ g),
    ))


def mat_mat(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    return _make(out, (
        _part(a, lambda g: g @ bv.T),
        _part(b, lambda g: av.T @ g),
    ))


def take_column(m, j):
    mv = value_of(m)
    out = mv[:, j]

    def back(g, mv=mv, j=j):
        gm = np.zeros_like(mv)
        gm[:, j] = g
        return gm

    return _make(out, (_part(m, back),))


def take(v, i):
    vv = value_of(v)
    out = float(vv[i])

    def back(g, n=len(vv), i=i):
        gv = np.zeros(n)
        gv[i] = g
        return gv

    return _make(out, (_part(v, back),))


def slice_vec(v, a, b):
    vv = value_of(v)
    out = vv[a:b]

    def back(g, n=len(vv), a=a, b=b):
        gv = np.zeros(n)
        gv[a:b] = g
        return gv

    return _make(out, (_part(v, back),))


def vstack(mats):
    vals = [value_of(m) for m in mats]
    out = np.vstack(vals)
    rows = np.cumsum([0] + [v.shape[0] for v in vals])
    parts = tuple(
        _part(m, (lambda g, a=rows[i], b=rows[i + 1]: g[a:b]))
        for i, m in enumerate(mats)
    )
    return _make(out, parts)


def concat(vecs):
    vals = [np.atleast_1d(value_of(v)) for v in vecs]
    out = np.concatenate(vals)
    offs = np.cumsum([0] + [v.shape[0] for v in vals])
    parts = tuple(
        _part(v, (lambda g, a=offs[i], b=offs[i + 1]: g[a:b]))
        for i, v in enumerate(vecs)
    )
    return _make(out, parts)


def vsum(v):
    vv = value_of(v)
    out = float(np.sum(vv))
    return _make(out, (_part(v, lambda g, n=len(vv): np.full(n, g)),))


# -- reverse pass -------------------------------------------------------------

def backward(root: Var) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable Var."""
    # postorder over the acyclic tape; a node is marked only once expansion
    # starts, so every input is appended before each of its consumers
    order: list[Var] = []
    expanded: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in expanded:
            continue
        expanded.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parts:
            if id(parent) not in expanded:
                stack.append((parent, False))
    root.grad = np.ones_like(np.asarray(root.value, dtype=float)) if np.shape(root.value) else 1.0
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parts:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
