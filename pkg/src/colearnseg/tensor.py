"""Dense float32 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus the closure needed to push gradients back
to its parents. Graphs are built implicitly by the operations in ``ops``;
calling :func:`backward` on a scalar loss walks the graph once in reverse
topological order and accumulates gradients into every reachable
:class:`Parameter`.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

DTYPE = np.float32

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense n-dimensional float32 array, optionally part of an autograd graph.

    ``data`` is treated as immutable once the tensor participates in a graph;
    only the optimizer mutates Parameter data, and only between graph builds.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        # note: ascontiguousarray would promote 0-d scalars to 1-d
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.requires_grad else 'no'})"


class Parameter(Tensor):
    """A learnable tensor with a persistent gradient buffer and a unique name.

    ``kind`` tags what the parameter is ("kernel", "bias", "gain", "shift") so
    the regularizer can select convolution kernels only.
    """

    __slots__ = ("name", "kind")

    def __init__(self, value, name: str, kind: str = "kernel"):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.kind = kind
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape}, kind={self.kind})"


def _toposort(root: Tensor) -> list:
    """Iterative postorder over the graph reachable from ``root``."""
    order = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Populate gradients of every Parameter reachable from ``loss``.

    Gradients accumulate (+=) into Parameter.grad; intermediate tensors have
    their transient grads freed as soon as they have been consumed.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    loss.grad = np.ones((), dtype=DTYPE)
    for node in reversed(order):
        g = node.grad
        if g is None or node._backward is None:
            if not isinstance(node, Parameter):
                node.grad = None
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                # own a fresh buffer: closures may hand back views
                parent.grad = np.array(pg, dtype=DTYPE, copy=True)
            else:
                parent.grad += pg
        # break links so caches (im2col buffers etc.) free promptly
        node.grad = None
        node._backward = None
        node._parents = ()


def zero_grads(params) -> None:
    """Zero the gradient buffer of every parameter in the iterable."""
    for p in params:
        p.zero_grad()
