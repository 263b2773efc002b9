"""Minimal reverse-mode tape over float64 numpy arrays.

Just enough machinery to differentiate the unrolled tracking loss with
respect to a handful of scalars and one small matrix: elementwise arithmetic
with broadcasting, matmul, sum/max reductions, a few pointwise nonlinearities,
concat and reshape. Nodes form a DAG built eagerly during the forward pass;
``backward`` walks it once in reverse topological order.

Gradient conventions worth pinning down:
  - max reductions send the incoming gradient to the first maximizer along
    the reduced axis (ties are deterministic, matching np.argmax),
  - clip passes gradient on the closed interval [lo, hi],
  - broadcasting is undone by summing over the broadcast axes.

Everything is float64; this module is for training and verification, not the
float32 inference path.
"""

from __future__ import annotations

import numpy as np


class Value:
    """One node: an array, its parents, and the vector-Jacobian products."""

    __slots__ = ("data", "grad", "_parents", "_vjps")

    # keep ndarray + Value from coercing through numpy; defer to our __r*__
    __array_ufunc__ = None

    def __init__(self, data, parents=(), vjps=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjps = vjps

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape})"

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        other = as_value(other)
        return Value(
            self.data + other.data,
            (self, other),
            (lambda g: _unbroadcast(g, self.shape), lambda g: _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Value(-self.data, (self,), (lambda g: -g,))

    def __sub__(self, other):
        other = as_value(other)
        return Value(
            self.data - other.data,
            (self, other),
            (lambda g: _unbroadcast(g, self.shape), lambda g: _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other):
        return as_value(other) - self

    def __mul__(self, other):
        other = as_value(other)
        return Value(
            self.data * other.data,
            (self, other),
            (
                lambda g: _unbroadcast(g * other.data, self.shape),
                lambda g: _unbroadcast(g * self.data, other.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_value(other)
        return Value(
            self.data / other.data,
            (self, other),
            (
                lambda g: _unbroadcast(g / other.data, self.shape),
                lambda g: _unbroadcast(-g * self.data / (other.data * other.data), other.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_value(other) / self

    def __matmul__(self, other):
        other = as_value(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim not in (1, 2):
            raise ValueError(f"matmul supports (2-D @ 1/2-D) only, got {a.shape} @ {b.shape}")
        if b.ndim == 1:
            return Value(
                a @ b,
                (self, other),
                (lambda g: np.outer(g, b), lambda g: a.T @ g),
            )
        return Value(
            a @ b,
            (self, other),
            (lambda g: g @ b.T, lambda g: a.T @ g),
        )

    def __rmatmul__(self, other):
        return as_value(other) @ self


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def constant(x) -> Value:
    """Leaf with no gradient accumulation of its own (still gets .grad)."""
    return Value(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def relu(v: Value) -> Value:
    v = as_value(v)
    mask = v.data > 0
    return Value(np.where(mask, v.data, 0.0), (v,), (lambda g: g * mask,))


def sigmoid(v: Value) -> Value:
    v = as_value(v)
    z = v.data
    ez = np.exp(np.clip(z, None, 0.0))
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.clip(z, 0.0, None))), ez / (1.0 + ez))
    return Value(out, (v,), (lambda g: g * out * (1.0 - out),))


def log(v: Value) -> Value:
    v = as_value(v)
    return Value(np.log(v.data), (v,), (lambda g: g / v.data,))


def sqrt(v: Value) -> Value:
    v = as_value(v)
    root = np.sqrt(v.data)
    return Value(root, (v,), (lambda g: g * 0.5 / root,))


def clip(v: Value, lo: float, hi: float) -> Value:
    v = as_value(v)
    inside = (v.data >= lo) & (v.data <= hi)
    return Value(np.clip(v.data, lo, hi), (v,), (lambda g: g * inside,))


def vsum(v: Value, axis=None) -> Value:
    v = as_value(v)
    out = v.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, v.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), v.shape).copy()

    return Value(out, (v,), (vjp,))


def amax(v: Value, axis: int = 0) -> Value:
    """Max along one axis; gradient goes to the first maximizer only."""
    v = as_value(v)
    if v.data.shape[axis] == 0:
        raise ValueError("cannot reduce an empty axis")
    idx = np.argmax(v.data, axis=axis)
    out = np.take_along_axis(v.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(v.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return full

    return Value(out, (v,), (vjp,))


def concat(parts, axis: int = 0) -> Value:
    parts = [as_value(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * parts[i].data.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        return lambda g: g[tuple(sl)]

    return Value(
        np.concatenate([p.data for p in parts], axis=axis),
        tuple(parts),
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def reshape(v: Value, shape) -> Value:
    v = as_value(v)
    old = v.data.shape
    return Value(v.data.reshape(shape), (v,), (lambda g: g.reshape(old),))


def backward(loss: Value) -> None:
    """Populate .grad over the graph below a scalar loss node."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {loss.data.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if not node._parents:
            continue
        g = node.grad
        for parent, vjp in zip(node._parents, node._vjps):
            parent.grad = parent.grad + vjp(g)
