"""Small tape-free reverse-mode automatic differentiation over numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Calling
:func:`grad` walks the graph once in reverse topological order and then
releases it; a second call on the same root raises :class:`GraphFreedError`.

Broadcasting follows numpy semantics and gradients are summed back to the
parent's shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphFreedError, InputError

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_freed")

    __array_priority__ = 100  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._freed = False

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        for p in parents:
            if p._freed:
                raise GraphFreedError("operand belongs to a graph that was already differentiated")
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise binary ops -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), back)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise InputError("matmul operands must be at least 2-D")

    if b.ndim == 2 and a.ndim > 2:
        return _matmul_flat(a, b)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), back)


def _matmul_flat(a: Tensor, b: Tensor) -> Tensor:
    # (..., k) @ (k, m) as a single 2-D GEMM rather than a batch of tiny ones
    k = a.shape[-1]
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

    def back(g):
        g2 = g.reshape(-1, b.shape[1])
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), back)


# -- unary ops --------------------------------------------------------------

def _unary(x, fwd, dfn) -> Tensor:
    x = as_tensor(x)
    out = fwd(x.data)

    def back(g):
        return (g * dfn(x.data, out),)

    return _node(out, (x,), back)


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda _, y: y)


def log(x) -> Tensor:
    return _unary(x, np.log, lambda v, _: 1.0 / v)


def sin(x) -> Tensor:
    return _unary(x, np.sin, lambda v, _: np.cos(v))


def cos(x) -> Tensor:
    return _unary(x, np.cos, lambda v, _: -np.sin(v))


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda _, y: 1.0 - y * y)


def sqrt(x) -> Tensor:
    return _unary(x, np.sqrt, lambda _, y: 0.5 / y)


def square(x) -> Tensor:
    return _unary(x, np.square, lambda v, _: 2.0 * v)


def power(x, exponent: float) -> Tensor:
    return _unary(x, lambda v: v ** exponent, lambda v, _: exponent * v ** (exponent - 1))


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def back(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _node(out, (x,), back)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), back)


# -- reductions and shape ops -----------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (g.reshape(x.shape),)

    return _node(x.data.reshape(shape), (x,), back)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return _node(np.transpose(x.data, axes), (x,), back)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (_unbroadcast(g, x.shape),)

    return _node(np.broadcast_to(x.data, shape), (x,), back)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), back)


def take_rows(table, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; gradient scatters back with accumulation."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(table.data[idx], (table,), back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _node(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), back)


# -- differentiation --------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def grad(root: Tensor, wrt: Iterable[Tensor], free: bool = True) -> list[np.ndarray]:
    """Gradients of a scalar ``root`` with respect to each tensor in ``wrt``.

    Tensors that ``root`` does not depend on get zero gradients.  With
    ``free=True`` (the default) the graph is released afterwards.
    """
    wrt = list(wrt)
    if root._freed:
        raise GraphFreedError("graph was already differentiated and freed")
    if root.data.size != 1:
        raise InputError(f"gradient root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    targets = {id(t) for t in wrt}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        if id(node) not in targets:
            del grads[id(node)]
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape))
    if free:
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True
    return out
