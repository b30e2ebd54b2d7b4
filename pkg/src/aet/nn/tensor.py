"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
parent tensors and a closure mapping the output gradient to one gradient per
parent. :func:`backward` walks that record once in reverse topological order.
"""

from __future__ import annotations

import contextlib

import numpy as np

from ..errors import DisconnectedLoss, NonFiniteError, NotScalar, ShapeMismatch

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional float64 array that may take part in a recorded graph."""

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, params=None):
        return backward(self, params)

    def __repr__(self):
        tag = f", op={self._op}" if not self.is_leaf else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar used by tests and losses
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.mul(as_tensor(other), -1.0))

    def sum(self):
        from . import ops
        return ops.sum(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a name and an SGD momentum buffer."""

    def __init__(self, data, name="param"):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.momentum = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(arr, op, phase="forward"):
    # a single sum propagates any NaN/Inf; the full scan only confirms overflow cases
    if not np.isfinite(np.sum(arr)) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(op, phase)


def make_result(data, parents, backward_fn, op) -> Tensor:
    """Wrap an op's output, recording the graph edge when gradients are on."""
    check_finite(data, op)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, _op=op)


def _topo_order(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
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


def backward(loss: Tensor, params=None):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. Any tensor in
    ``params`` that the loss does not depend on receives a zero gradient.
    Returns ``params`` (or the reached leaves when ``params`` is None).
    """
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DisconnectedLoss("loss is not connected to any tensor requiring gradients")

    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves.append(node)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise ShapeMismatch(f"'{node._op}' produced gradient {pg.shape} for input {p.data.shape}")
            check_finite(pg, node._op, "backward")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg

    if params is None:
        return leaves
    params = list(params)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    return params
