"""Array container with reverse-mode gradient tracking.

Every differentiable op builds a new :class:`Tensor` whose ``_backward``
closure receives the upstream gradient and accumulates into its parents.
Calling :meth:`Tensor.backward` on a scalar walks the graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


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


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autograd ---------------------------------------------------------
    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate buffers are not needed once propagated
                node.grad = None if node._parents else node.grad

    # -- arithmetic sugar -------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype if dtype is not None else DEFAULT_DTYPE)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(unbroadcast(g, b.shape))

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(unbroadcast(-g, b.shape))

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(unbroadcast(g * a.data, b.shape))

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate(unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_result(a.data / b.data, (a, b), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def backward(g):
        x.accumulate(g.reshape(x.shape))

    return make_result(x.data.reshape(shape), (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, x.shape))

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g / count, x.shape))

    return make_result(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward)


def tmax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=axis)
        x.accumulate(gx)

    return make_result(out if keepdims else np.squeeze(out, axis), (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t.accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


class Parameter(Tensor):
    """Trainable tensor, optionally constrained by a binary mask.

    Masked entries of ``data`` are held at exactly +0.0; ``enforce_mask``
    restores that after any in-place update.
    """

    __slots__ = ("mask", "decay_exempt")

    def __init__(self, data, mask=None, decay_exempt: bool = False, dtype=None, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.decay_exempt = decay_exempt
        self.mask: Optional[np.ndarray] = None
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != self.data.shape:
                raise ShapeError(f"mask shape {mask.shape} does not match parameter shape {self.data.shape}")
            self.mask = mask.astype(bool)
            self.enforce_mask()

    @property
    def value(self) -> np.ndarray:
        return self.data

    def enforce_mask(self) -> None:
        if self.mask is not None:
            self.data = np.where(self.mask, self.data, self.data.dtype.type(0))

    def mask_grad(self) -> None:
        if self.mask is not None and self.grad is not None:
            self.grad = np.where(self.mask, self.grad, self.grad.dtype.type(0))

    def masked_value(self) -> np.ndarray:
        return self.data if self.mask is None else np.where(self.mask, self.data, self.data.dtype.type(0))

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = None if self.grad is None else self.grad.astype(dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        masked = "" if self.mask is None else f", masked={int((~self.mask).sum())}"
        return f"Parameter(name={self.name!r}, shape={self.shape}{masked})"
