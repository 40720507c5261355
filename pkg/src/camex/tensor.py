"""Dense float64 tensors with reverse-mode differentiation.

Every value is a numpy float64 array.  Operations on tensors that require
gradients record a node holding the parents and a closure that maps the output
gradient onto the parents.  ``Tensor.backward`` replays those closures in
reverse creation order, so each node is visited once.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation that rejects them."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_counter)
        self.op = "leaf"

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.require(np.asarray(data, dtype=np.float64), requirements="C")  # keeps 0-d shape
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._id = next(_counter)
        t.op = "const"
        return t

    @classmethod
    def _node(cls, data, parents, backward, op) -> "Tensor":
        out = cls._wrap(data)
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return detach(self)

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def abs(self) -> "Tensor":
        return tabs(self)

    # --------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Gradients are added to whatever is already stored; call ``zero_grad``
        between independent evaluations.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=np.float64)}
        for node in nodes:  # descending creation id == reverse execution order
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    return [seen[k] for k in sorted(seen, reverse=True)]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------- primitives
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._node(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes follow numpy rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from exc

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._node(out, (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    out = x.data.reshape(shape)
    if np.prod(out.shape, dtype=np.int64) != x.size:
        raise ShapeError(f"reshape: {src} -> {shape}")
    return Tensor._node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2) if x.ndim >= 2 else (0,)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._node(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._node(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def tabs(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    return Tensor._node(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def sign(x: Tensor) -> Tensor:
    """Elementwise sign; a constant as far as gradients are concerned."""
    return Tensor._wrap(np.sign(as_tensor(x).data))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._node(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("log_softmax: NaN input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return Tensor._node(
        out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; gradients scatter-add back."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape
    ax = axis % x.ndim

    def backward(g):
        gx = np.zeros(shape)
        moved = np.moveaxis(gx, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + index.ndim)), tuple(range(index.ndim)))
        np.add.at(moved, index, gm)
        return (gx,)

    return Tensor._node(np.take(x.data, index, axis=ax), (x,), backward, "take")


def take_along(x: Tensor, index, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        idx = np.indices(index.shape, sparse=True)
        full = list(idx)
        full[axis] = index
        np.add.at(gx, tuple(full), g)
        return (gx,)

    return Tensor._node(np.take_along_axis(x.data, index, axis=axis), (x,), backward, "take_along")


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return Tensor._node(x.data[index], (x,), backward, "getitem")


def detach(x: Tensor) -> Tensor:
    """Same values, no path back to ``x``."""
    out = Tensor._wrap(as_tensor(x).data.copy())
    out.op = "detach"
    return out


def topk_indices(x, k: int, axis: int = -1) -> np.ndarray:
    """Indices of the ``k`` largest entries, ties resolved towards lower index.

    Not differentiable; returns a plain integer array.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if k < 1 or k > data.shape[axis]:
        raise ValueError(f"top-k: k={k} outside [1, {data.shape[axis]}]")
    order = np.argsort(-data, axis=axis, kind="stable")
    return np.take(order, np.arange(k), axis=axis)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation: 0.5 x (1 + tanh(GELU_C (x + GELU_A x^3)))."""
    x = as_tensor(x)
    inner = (x + x * x * x * GELU_A) * GELU_C
    return x * (tanh(inner) + 1.0) * 0.5


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    """Stack equal-shape tensors along a new axis (composed from reshape/take)."""
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    out = None
    n = len(tensors)
    for i, t in enumerate(tensors):
        if t.shape != shape:
            raise ShapeError(f"stack: {t.shape} != {shape}")
        onehot = np.zeros(n)
        onehot[i] = 1.0
        e = onehot.reshape((1,) * axis + (n,) + (1,) * (len(shape) - axis))
        term = reshape(t, shape[:axis] + (1,) + shape[axis:]) * e
        out = term if out is None else out + term
    return out
