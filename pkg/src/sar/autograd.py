"""A small reverse-mode autodiff over numpy arrays.

Only the operations the scorer and the type discriminator need are
provided.  Everything runs in float64 so finite-difference checks are
meaningful.
"""
import numpy as np

from . import _kernels as K


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, _parents=(a, b), _backward=backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, _parents=(a, b), _backward=backward)


def scale(a, c):
    def backward(g):
        a._accumulate(g * c)

    return Tensor(a.data * c, _parents=(a,), _backward=backward)


def matmul(a, b, transpose_b=False):
    """Batched ``a @ b`` (or ``a @ b^T`` on the last two axes)."""
    a, b = as_tensor(a), as_tensor(b)
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    out = a.data @ bd

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if gb.ndim > bd.ndim:
                gb = _unbroadcast(gb, bd.shape)
            b._accumulate(np.swapaxes(gb, -1, -2) if transpose_b else gb)

    return Tensor(out, _parents=(a, b), _backward=backward)


def tanh(a):
    y = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - y * y))

    return Tensor(y, _parents=(a,), _backward=backward)


def relu(a):
    y = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return Tensor(y, _parents=(a,), _backward=backward)


def sigmoid(a):
    y = K.sigmoid(a.data)

    def backward(g):
        a._accumulate(g * y * (1.0 - y))

    return Tensor(y, _parents=(a,), _backward=backward)


def softmax(a, mask=None):
    """Softmax over the last axis; masked-out slots get exactly zero weight."""
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    y = K.softmax_lastaxis(a.data, mask)

    def backward(g):
        a._accumulate(K.softmax_backward(y, g))

    return Tensor(y, _parents=(a,), _backward=backward)


def sum_axis(a, axis, keepdims=False):
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.shape))

    return Tensor(y, _parents=(a,), _backward=backward)


def reshape(a, shape):
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=backward)


def broadcast_to(a, shape):
    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return Tensor(np.broadcast_to(a.data, shape), _parents=(a,), _backward=backward)


def concat(parts, axis):
    """Concatenate same-rank tensors along ``axis``."""
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, sizes, axis=axis)):
            p._accumulate(piece)

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts), _backward=backward)


def mean(a):
    n = a.data.size

    def backward(g):
        a._accumulate(np.full(a.shape, g / n))

    return Tensor(a.data.mean(), _parents=(a,), _backward=backward)


def gather_rows(table, idx):
    """``table[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx)

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx.ravel(), g.reshape(-1, table.shape[-1]))
            table._accumulate(full)

    return Tensor(table.data[idx], _parents=(table,), _backward=backward)


def take(a, index, axis):
    """Select a single position along ``axis`` (the axis is dropped)."""
    y = np.take(a.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        a._accumulate(full)

    return Tensor(y, _parents=(a,), _backward=backward)


def bce_with_logits_mean(z, t):
    """Mean binary cross-entropy of logits ``z`` against soft targets ``t``."""
    t = np.asarray(t, dtype=np.float64)
    n = z.data.size
    value = K.bce_logits(z.data, t).mean()

    def backward(g):
        z._accumulate(g * (K.sigmoid(z.data) - t) / n)

    return Tensor(value, _parents=(z,), _backward=backward)
