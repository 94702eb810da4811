"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op produces a :class:`Tensor` carrying a :class:`Node`
that records its inputs and a closure mapping the output gradient to input
gradients.  :func:`backward` linearises the graph reachable from a scalar
loss into a :class:`Tape` and replays it in reverse.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    # maps d(loss)/d(output) to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """N-dimensional float array that may participate in the gradient tape."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction ----------------------------------------------
    @staticmethod
    def from_op(data: np.ndarray, op: str, inputs: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = Node(op, tuple(inputs), backward_fn)
        return out

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementary differentiable ops ------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data + b.data, "add", (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def back(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(ad * bd, "mul", (a, b), back)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor.from_op(out, "reciprocal", (a,), lambda g: (-g * out * out,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul inner dimension mismatch: {ad.shape[1]} vs {bd.shape[0]}")
    return Tensor.from_op(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.sum(a.data, axis=axes, keepdims=keepdims), "sum", (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, back)


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op(np.log(ad), "log", (a,), lambda g: (g / ad,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return Tensor.from_op(np.clip(ad, lo, hi), "clip", (a,), lambda g: (g * inside,))


# -- tape and backward -------------------------------------------------------

@dataclass
class Tape:
    """Topologically ordered list of op outputs (inputs precede consumers)."""

    nodes: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        tape = cls()
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                tape.nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is None:
                if t.requires_grad:
                    tape.leaves.append(t)
                continue
            stack.append((t, True))
            for parent in t._node.inputs:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return tape

    def __contains__(self, t: Tensor) -> bool:
        return any(t is n for n in self.nodes) or any(t is leaf for leaf in self.leaves)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Populate ``grad`` on every leaf that ``loss`` depends on.

    Leaf gradients accumulate into any existing ``grad``; leaves on the tape
    that receive no gradient are given zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    if tape is None:
        tape = Tape.record(loss)
    elif loss not in tape:
        raise ValueError("loss tensor is not on the supplied tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t._node.inputs, t._node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return tape
