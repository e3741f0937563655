"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Covers exactly what the policy network and its training loop need: matmul,
broadcast add, elementwise multiply, relu, tanh, softmax over the last axis,
log, mean/sum, concatenation, masked fill with -inf semantics, row gather,
and 2-D transpose.  Gradients accumulate additively; repeated backward calls
without a reset keep accumulating.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ContractError(ValueError):
    """An autodiff API contract was violated (e.g. non-scalar loss)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(data, parents, backward) -> Tensor:
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(b)
    out_data = a.data + b.data

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(b)
    out_data = a.data * b.data

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError("matmul expects 2-D operands")
    out_data = a.data @ b.data

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ContractError("transpose expects a 2-D tensor")

    def backward(g, a=a):
        if a.requires_grad:
            a._accumulate(g.T)

    return _make(a.data.T.copy(), (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g, a=a, mask=a.data > 0.0):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g, a=a, y=out_data):
        if a.requires_grad:
            a._accumulate(g * (1.0 - y * y))

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g, a=a):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; -inf entries map to exact zeros."""
    m = np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out_data = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g, a=a, y=out_data):
        if a.requires_grad:
            dot = np.sum(g * y, axis=-1, keepdims=True)
            a._accumulate(y * (g - dot))

    return _make(out_data, (a,), backward)


def mean(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.mean())

    def backward(g, a=a):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g / a.data.size))

    return _make(out_data, (a,), backward)


def tsum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def backward(g, a=a):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, g))

    return _make(out_data, (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, tensors=tuple(tensors), offsets=offsets, axis=axis):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = -np.inf) -> Tensor:
    # Copy: callers may mutate their mask after recording (rollout does).
    mask = np.array(mask, dtype=bool, copy=True)
    if mask.shape != a.data.shape:
        raise ContractError("mask shape must match the tensor shape")
    out_data = np.where(mask, value, a.data)

    def backward(g, a=a, mask=mask):
        if a.requires_grad:
            a._accumulate(np.where(mask, 0.0, g))

    return _make(out_data, (a,), backward)


def gather(a: Tensor, indices) -> Tensor:
    """Select rows (first axis) by integer indices."""
    idx = np.asarray(indices, dtype=np.intp)
    out_data = a.data[idx]

    def backward(g, a=a, idx=idx):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a._accumulate(ga)

    return _make(out_data, (a,), backward)


class Tape:
    """Topologically ordered operation records below one root tensor.

    ``records`` lists every tracked tensor reachable from the root, leaves
    first; the reverse pass visits each exactly once in reverse order.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.records = order

    def backward(self, seed: np.ndarray):
        root = self.records[-1]
        root._accumulate(seed)
        for node in reversed(self.records):
            if node._backward is not None:
                node._backward(node.grad)


def backward(loss: Tensor):
    """Populate d loss / d leaf for every tracked leaf below ``loss``."""
    if loss.data.shape != ():
        raise ContractError("backward requires a scalar loss tensor")
    if not loss.requires_grad:
        raise ContractError("loss is not tracked; nothing to differentiate")
    Tape(loss).backward(np.asarray(1.0))
