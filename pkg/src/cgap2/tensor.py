"""Minimal reverse-mode autodiff tensor on top of numpy.

Tensors wrap a contiguous numpy array (float32 by default, float64 for
gradient checking) and record a backward closure per operation. Calling
``backward()`` on a scalar loss walks the graph in reverse topological
order and accumulates gradients into every reachable tensor that has
``requires_grad`` set.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class UsageError(RuntimeError):
    """Raised on API misuse, e.g. backward() on a non-scalar."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_op(data, parents, backward_fn):
        """Wrap an op result; ``backward_fn(grad)`` returns one gradient
        array (or None) per parent."""
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out = self.data + other.data
        return Tensor.from_op(out, (self, other), lambda g: (
            _unbroadcast(g, self.data.shape),
            _unbroadcast(g, other.data.shape),
        ))

    __radd__ = __add__

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._coerce(other)
        out = self.data - other.data
        return Tensor.from_op(out, (self, other), lambda g: (
            _unbroadcast(g, self.data.shape),
            _unbroadcast(-g, other.data.shape),
        ))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        out = self.data * other.data
        return Tensor.from_op(out, (self, other), lambda g: (
            _unbroadcast(g * other.data, self.data.shape),
            _unbroadcast(g * self.data, other.data.shape),
        ))

    __rmul__ = __mul__

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.data.shape
        out = self.data.reshape(shape)
        return Tensor.from_op(out, (self,), lambda g: (g.reshape(in_shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        out = np.ascontiguousarray(self.data.transpose(axes))
        return Tensor.from_op(out, (self,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))

    def sum(self):
        out = self.data.sum()
        in_shape = self.data.shape
        dtype = self.data.dtype
        return Tensor.from_op(out, (self,), lambda g: (np.full(in_shape, g, dtype=dtype),))

    def mean(self):
        n = self.data.size
        out = self.data.mean()
        in_shape = self.data.shape
        dtype = self.data.dtype
        return Tensor.from_op(out, (self,), lambda g: (np.full(in_shape, g / n, dtype=dtype),))

    # -- autodiff -------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad.

        Gradients accumulate (+=) across multiple uses of the same tensor.
        """
        if self.data.shape != ():
            raise UsageError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones((), dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g.astype(node.data.dtype, copy=False)
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Parameter:
    """Trainable tensor plus its SGD momentum buffer and a freeze flag.

    A frozen parameter is skipped entirely by the optimizer: neither the
    value nor the momentum buffer changes.
    """

    def __init__(self, data, frozen=False):
        self.value = Tensor(data, requires_grad=True)
        self.momentum_buffer = np.zeros_like(self.value.data)
        self.frozen = bool(frozen)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.value.grad = None

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, frozen={self.frozen})"
