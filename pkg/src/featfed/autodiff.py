"""Tape-free reverse-mode differentiation over numpy arrays.

Each :class:`Tensor` remembers its parents and a closure that pushes the
upstream gradient back to them.  ``backward`` orders the graph topologically
and runs the closures once.  Only the handful of ops the models and losses
need are provided.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    # make numpy hand binary ops back to us (ndarray @ Tensor etc.)
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self._backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor({self.value!r})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor(a.value + b.value, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor(-a.value, (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            a._accumulate(_unbroadcast(g * b.value, a.shape))
            b._accumulate(_unbroadcast(g * a.value, b.shape))

        return Tensor(a.value * b.value, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            a._accumulate(_unbroadcast(g / b.value, a.shape))
            b._accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.shape))

        return Tensor(a.value / b.value, (a, b), back)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accumulate(g @ b.value.T if b.ndim == 2 else np.outer(g, b.value))
            if b.requires_grad:
                b._accumulate(a.value.T @ g)

        return Tensor(a.value @ b.value, (a, b), back)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, idx):
        a = self

        def back(g):
            full = np.zeros_like(a.value)
            np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor(a.value[idx], (a,), back)

    def reshape(self, *shape):
        a = self
        return Tensor(a.value.reshape(*shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))

    @property
    def T(self):
        a = self
        return Tensor(a.value.T, (a,), lambda g: a._accumulate(g.T))

    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / n


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.value)
    return Tensor(out, (x,), lambda g: x._accumulate(g * out))


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.value)
    return Tensor(out, (x,), lambda g: x._accumulate(g / x.value))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.value)
    return Tensor(out, (x,), lambda g: x._accumulate(g * 0.5 / out))


def clamped_sqrt(x, floor=1e-12):
    """``sqrt(max(x, 0))`` whose derivative is evaluated no closer to 0 than ``floor``."""
    x = as_tensor(x)
    clipped = np.maximum(x.value, 0.0)
    out = np.sqrt(clipped)

    def back(g):
        d = np.where(x.value > 0.0, 0.5 / np.sqrt(np.maximum(clipped, floor)), 0.0)
        x._accumulate(g * d)

    return Tensor(out, (x,), back)


def relu(x):
    if not isinstance(x, Tensor):
        return np.maximum(x, 0.0)
    mask = x.value > 0.0
    return Tensor(x.value * mask, (x,), lambda g: x._accumulate(g * mask))


def stop_gradient(x) -> Tensor:
    return Tensor(value_of(x))
