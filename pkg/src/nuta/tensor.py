"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op creates its output through :func:`_record`, which
stamps a monotonically increasing sequence number on the recorded node.
Sorting reachable nodes by that number gives the tape order, so
:func:`backward` is a reverse replay of the tape restricted to the
sub-graph feeding the loss.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_SEQ = itertools.count()
_MAC_COUNTERS: list[dict] = []


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a checked tensor; ``tensor`` is
    the offending value when it is a tape tensor."""

    def __init__(self, message: str, tensor=None):
        super().__init__(message)
        self.tensor = tensor


@dataclass(eq=False)
class Node:
    seq: int
    parents: tuple
    backward: Callable  # grad_out -> tuple of parent grads (None to skip)
    name: str


@dataclass(eq=False)
class Tape:
    """A read-only view of the operations recorded below a tensor."""

    nodes: list = field(default_factory=list)

    @classmethod
    def of(cls, out: "Tensor") -> "Tape":
        seen, stack, nodes = set(), [out], []
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append((t._node.seq, t))
            stack.extend(t._node.parents)
        nodes.sort(key=lambda p: p[0])
        return cls([t for _, t in nodes])

    def op_names(self) -> list[str]:
        return [t._node.name for t in self.nodes]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_retain", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._retain = False
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep ``grad`` on this (non-leaf) tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        tag = f" grad_fn={self._node.name}" if self._node else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)

    def sum(self):
        return sum_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn, name: str) -> Tensor:
    out = Tensor(data)
    live = tuple(parents)
    if any(p.requires_grad for p in live):
        out.requires_grad = True
        out._node = Node(next(_SEQ), live, backward_fn, name)
    return out


def check_finite(x, what: str = "tensor") -> None:
    arr = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}", x if isinstance(x, Tensor) else None)


# ---------------------------------------------------------------------------
# multiply-accumulate accounting (used by the instrumented FLOP counter)
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def count_macs():
    """Collect ``{kind: count}`` for every costed forward kernel in the block."""
    counter: dict = {}
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def _charge(kind: str, amount: int) -> None:
    for c in _MAC_COUNTERS:
        c[kind] = c.get(kind, 0) + int(amount)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor, grad=None) -> None:
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        raise RuntimeError("loss is detached: no recorded operation requires grad")

    tape = Tape.of(loss)
    grads = {id(loss): grad}
    leaves = {}
    if loss._node is None:
        leaves[id(loss)] = loss
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._retain:
            t.grad = g.copy() if t.grad is None else t.grad + g
        pgrads = t._node.backward(g)
        for p, pg in zip(t._node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"{t._node.name}: gradient shape {pg.shape} != input shape {p.shape}")
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
            if p._node is None:
                leaves[key] = p
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.astype(leaf.dtype, copy=True) if leaf.grad is None else leaf.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, ext in enumerate(shape):
        if ext == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(b)), as_tensor(b, _dt(a))
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def _dt(x):
    return x.dtype if isinstance(x, Tensor) else None


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def dropout(x: Tensor, ratio: float, train_mode: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if not train_mode or ratio == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = (rng.random(x.shape) >= ratio).astype(x.dtype) / x.dtype.type(1.0 - ratio)
    return _record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# shape algebra
# ---------------------------------------------------------------------------

def reshape(x: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if -1 not in new_shape and int(np.prod(new_shape)) != x.size:
        raise ShapeError(f"reshape: cannot map {x.shape} ({x.size} elements) to {new_shape}")
    if any(s < 1 and s != -1 for s in new_shape):
        raise ShapeError(f"reshape: extents must be >= 1, got {new_shape}")
    old = x.shape
    return _record(x.data.reshape(new_shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: Tensor, order) -> Tensor:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(x.ndim)):
        raise ShapeError(f"permute: {order} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(order))
    return _record(np.ascontiguousarray(x.data.transpose(order)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def transpose_last(x: Tensor) -> Tensor:
    order = list(range(x.ndim))
    order[-1], order[-2] = order[-2], order[-1]
    return permute(x, order)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis):
            raise ShapeError(f"concat on axis {axis}: shapes {ref} and {t.shape} disagree off-axis")
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=1)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_lastdims(x: Tensor, ndims: int) -> Tensor:
    """Mean over the trailing ``ndims`` axes (global pooling for ndims=3)."""
    if not 0 < ndims <= x.ndim:
        raise ShapeError(f"mean_lastdims: cannot reduce {ndims} axes of {x.shape}")
    axes = tuple(range(x.ndim - ndims, x.ndim))
    count = int(np.prod(x.shape[x.ndim - ndims:]))
    shape = x.shape

    def bw(g):
        g = g.reshape(g.shape + (1,) * ndims) / count
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return _record(x.data.mean(axis=axes), (x,), bw, "mean_lastdims")


# ---------------------------------------------------------------------------
# products and softmax
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: need equal-rank operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    batch = int(np.prod(a.shape[:-2], dtype=np.int64))
    _charge("matmul", batch * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), bw, "matmul")


def softmax_lastdim(x: Tensor) -> Tensor:
    check_finite(x, "softmax input")
    _charge("softmax", x.size)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), bw, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    check_finite(x, "log_softmax input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(y, (x,), bw, "log_softmax")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[i, index[i]]`` for a 2-D ``x``."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, index] = g
        return (out,)

    return _record(x.data[rows, index], (x,), bw, "gather_rows")
