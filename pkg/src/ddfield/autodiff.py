"""Reverse-mode automatic differentiation on a dynamic tape.

The op set is deliberately small: dense affine layers, scaled-dot-product
attention, and the loss terms need broadcasting arithmetic, 2D matmul,
concat/narrow, a softmax primitive, and a handful of pointwise
nonlinearities.  Everything runs on float64 numpy arrays; gradients
accumulate into ``Tensor.grad`` after calling ``backward`` on a scalar.

Subgradient conventions: |x|, relu and clip all use 0 at their kinks, so
gradients stay bounded and a loss sitting exactly on a kink produces no
update from that term.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "tensor", "parameter", "concat", "zero_grad"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tensor:
    """A node in the differentiation graph.

    ``_parents`` holds (parent, pullback) pairs; each pullback maps the
    node's output gradient to that parent's gradient contribution.
    Constant subgraphs (no parameter upstream) record no parents, so the
    tape only retains what backward will actually touch.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad=False, parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents) if self.requires_grad else ()

    # -- introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction helpers ------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=np.float64))

    def _make(self, data, parents):
        live = [(p, fn) for p, fn in parents if p.requires_grad]
        return Tensor(data, requires_grad=bool(live), parents=live)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        out_data = self.data + other.data
        return self._make(out_data, [
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(g, other.data.shape)),
        ])

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, [(self, lambda g: -g)])

    def __sub__(self, other):
        other = self._lift(other)
        out_data = self.data - other.data
        return self._make(out_data, [
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(-g, other.data.shape)),
        ])

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        other = self._lift(other)
        out_data = self.data * other.data
        return self._make(out_data, [
            (self, lambda g: _unbroadcast(g * other.data, self.data.shape)),
            (other, lambda g: _unbroadcast(g * self.data, other.data.shape)),
        ])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division only supports constant scalars")
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul supports 2D operands only")
        return self._make(a @ b, [
            (self, lambda g: g @ b.T),
            (other, lambda g: a.T @ g),
        ])

    # -- shape ops -----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        return self._make(self.data.reshape(shape),
                          [(self, lambda g: g.reshape(orig))])

    def narrow(self, axis: int, start: int, length: int):
        """Contiguous slice [start, start+length) along one axis."""
        idx = [slice(None)] * self.data.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        in_shape = self.data.shape

        def pull(g):
            full = np.zeros(in_shape)
            full[idx] = g
            return full

        return self._make(self.data[idx], [(self, pull)])

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        in_shape = self.data.shape
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def pull(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, in_shape).copy()

        return self._make(out_data, [(self, pull)])

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- pointwise nonlinearities ----------------------------------------

    def relu(self):
        mask = self.data > 0
        return self._make(np.where(mask, self.data, 0.0),
                          [(self, lambda g: g * mask)])

    def softplus(self):
        out_data = np.logaddexp(0.0, self.data)
        sig = _stable_sigmoid(self.data)
        return self._make(out_data, [(self, lambda g: g * sig)])

    def sigmoid(self):
        s = _stable_sigmoid(self.data)
        return self._make(s, [(self, lambda g: g * s * (1.0 - s))])

    def log(self):
        if np.any(self.data <= 0):
            raise ValueError("log requires strictly positive inputs")
        x = self.data
        return self._make(np.log(x), [(self, lambda g: g / x)])

    def abs(self):
        sign = np.sign(self.data)  # sign(0) = 0: subgradient convention
        return self._make(np.abs(self.data), [(self, lambda g: g * sign)])

    def clip(self, lo: float, hi: float):
        inside = (self.data > lo) & (self.data < hi)
        return self._make(np.clip(self.data, lo, hi),
                          [(self, lambda g: g * inside)])

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def pull(g):
            return y * (g - (g * y).sum(axis=axis, keepdims=True))

        return self._make(y, [(self, pull)])

    # -- backward --------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward requires a scalar output")
        if not self.requires_grad:
            raise ValueError("output does not depend on any parameter")

        # iterative post-order DFS; reversed gives topological order from
        # the output down, so every node's grad is complete before it
        # propagates to its parents
        order = []
        seen = set()
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
            for parent, _ in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, pull in node._parents:
                contribution = pull(node.grad)
                if parent.grad is None:
                    parent.grad = contribution
                else:
                    parent.grad = parent.grad + contribution


def tensor(data) -> Tensor:
    """Wrap data as a constant leaf; rejects NaN/Inf."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data must be finite")
    return Tensor(arr)


def parameter(data) -> Tensor:
    """Wrap data as a trainable leaf; rejects NaN/Inf."""
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameter data must be finite")
    return Tensor(arr, requires_grad=True)


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate tensors along an axis."""
    tensors = [Tensor._lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    ax = axis if axis >= 0 else out_data.ndim + axis

    parents = []
    offset = 0
    for t in tensors:
        width = t.data.shape[ax]
        start = offset

        def pull(g, start=start, width=width):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(start, start + width)
            return g[tuple(idx)]

        parents.append((t, pull))
        offset += width

    live = [(p, fn) for p, fn in parents if p.requires_grad]
    return Tensor(out_data, requires_grad=bool(live), parents=live)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None
