"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps one ndarray and records a backward closure per op; backward()
walks the tape in reverse topological order.  The op set is exactly what the
segmentation losses need: broadcasting arithmetic, exp/log/sqrt, relu, clip,
reductions, stack, matmul, and the strided 2-d convolution (dispatched to the
numba or numpy kernel backend).
"""

from __future__ import annotations

import numpy as np

from . import kernels


class NumericError(RuntimeError):
    """A non-finite value appeared where a finite one is required."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # ---- basic introspection -------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- autodiff driver ------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if not np.isfinite(self.data):
            raise NumericError("loss is non-finite")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def _accum(self, grad):
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += grad.reshape(self.data.shape)

    # ---- arithmetic ------------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other))

    def __add__(self, other):
        other = self._wrap(other)
        out = Tensor(self.data + other.data, _parents=(self, other))

        def bw():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad, other.shape))

        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,))

        def bw():
            self._accum(-out.grad)

        out._backward = bw
        return out

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        other = self._wrap(other)
        out = Tensor(self.data * other.data, _parents=(self, other))

        def bw():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad * self.data, other.shape))

        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        out = Tensor(self.data / other.data, _parents=(self, other))

        def bw():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad / other.data, self.shape))
            if other.requires_grad:
                other._accum(
                    _unbroadcast(-out.grad * self.data / other.data**2, other.shape)
                )

        out._backward = bw
        return out

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __pow__(self, exponent):
        assert np.isscalar(exponent)
        out = Tensor(self.data**exponent, _parents=(self,))

        def bw():
            self._accum(out.grad * exponent * self.data ** (exponent - 1))

        out._backward = bw
        return out

    # ---- elementwise functions ------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data), _parents=(self,))

        def bw():
            self._accum(out.grad * out.data)

        out._backward = bw
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,))

        def bw():
            self._accum(out.grad / self.data)

        out._backward = bw
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data), _parents=(self,))

        def bw():
            self._accum(out.grad * 0.5 / out.data)

        out._backward = bw
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0), _parents=(self,))

        def bw():
            self._accum(out.grad * (self.data > 0))

        out._backward = bw
        return out

    def clip(self, lo, hi):
        # gradient passes through inside [lo, hi], zero outside
        out = Tensor(np.clip(self.data, lo, hi), _parents=(self,))

        def bw():
            inside = (self.data >= lo) & (self.data <= hi)
            self._accum(out.grad * inside)

        out._backward = bw
        return out

    # ---- reductions and shape ops ---------------------------------------

    def sum(self, axis=None):
        out = Tensor(self.data.sum(axis=axis), _parents=(self,))

        def bw():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape))

        out._backward = bw
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis) / float(n)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _parents=(self,))

        def bw():
            self._accum(out.grad.reshape(self.shape))

        out._backward = bw
        return out

    @staticmethod
    def stack(tensors, axis=0):
        tensors = [Tensor._wrap(t) for t in tensors]
        out = Tensor(np.stack([t.data for t in tensors], axis=axis), _parents=tuple(tensors))

        def bw():
            pieces = np.split(out.grad, len(tensors), axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t._accum(np.squeeze(g, axis=axis))

        out._backward = bw
        return out

    @property
    def T(self):
        out = Tensor(self.data.T, _parents=(self,))

        def bw():
            self._accum(out.grad.T)

        out._backward = bw
        return out

    def matmul(self, other):
        other = self._wrap(other)
        out = Tensor(self.data @ other.data, _parents=(self, other))

        def bw():
            if self.requires_grad:
                self._accum(out.grad @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ out.grad)

        out._backward = bw
        return out

    # ---- convolution -----------------------------------------------------

    def conv2d(self, weight: "Tensor", bias: "Tensor", stride: int, pad: int):
        out_data = kernels.conv2d_forward(self.data, weight.data, bias.data, stride, pad)
        out = Tensor(out_data, _parents=(self, weight, bias))

        def bw():
            if self.requires_grad:
                self._accum(
                    kernels.conv2d_backward_input(out.grad, weight.data, self.shape, stride, pad)
                )
            if weight.requires_grad or bias.requires_grad:
                gw, gb = kernels.conv2d_backward_weight(
                    out.grad, self.data, weight.shape, stride, pad
                )
                if weight.requires_grad:
                    weight._accum(gw)
                if bias.requires_grad:
                    bias._accum(gb)

        out._backward = bw
        return out
