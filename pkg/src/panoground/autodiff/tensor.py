"""Dense tensors with reverse-mode gradients.

Every differentiable op produces a new :class:`Tensor` that remembers its
parents and a closure mapping the output adjoint to parent adjoints. Nodes
carry a monotonically increasing creation id, so replaying nodes in
descending id order visits each node only after all of its consumers.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import weakref
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count()
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_tracker: contextvars.ContextVar["MemoryTracker | None"] = contextvars.ContextVar("tracker", default=None)
_corrupt: contextvars.ContextVar[tuple[str, float] | None] = contextvars.ContextVar("corrupt", default=None)


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class NumericFault(AutodiffError, FloatingPointError):
    def __init__(self, op: str, where: str = "forward"):
        self.op = op
        super().__init__(f"{op}: non-finite values in {where} pass")


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def corrupt_adjoint(op: str, factor: float = 1.01) -> Iterator[None]:
    """Scale the parent adjoints of every ``op`` node built inside the block.

    A deliberately wrong backward pass, used to confirm a gradient check fails.
    """
    token = _corrupt.set((op, factor))
    try:
        yield
    finally:
        _corrupt.reset(token)


class MemoryTracker:
    """Peak bytes held by live tensor buffers created inside the block."""

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0
        self.allocated = 0

    def _alloc(self, obj: "Tensor", nbytes: int) -> None:
        self.current += nbytes
        self.allocated += nbytes
        self.peak = max(self.peak, self.current)
        weakref.finalize(obj, self._free, nbytes)

    def _free(self, nbytes: int) -> None:
        self.current -= nbytes

    @contextlib.contextmanager
    def track(self) -> Iterator["MemoryTracker"]:
        token = _tracker.set(self)
        try:
            yield self
        finally:
            _tracker.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op", "_retain", "__weakref__")
    # let numpy defer to our reflected operators (ndarray * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_ids)
        self._retain = False
        self.op = "leaf"
        tracker = _tracker.get()
        if tracker is not None:
            tracker._alloc(self, arr.nbytes)

    # -- basic properties ---------------------------------------------------
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
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep this (non-leaf) tensor's adjoint in ``.grad`` after backward."""
        self._retain = True
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar (implemented in ops) --------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap ``x``; plain scalars take the dtype of ``like`` so constants never promote."""
    if isinstance(x, Tensor):
        return x
    if like is not None and np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        return Tensor(x, dtype=like.dtype)
    return Tensor(x)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap an op result, recording the adjoint closure when needed."""
    if not np.all(np.isfinite(data)):
        raise NumericFault(op)
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        bad = _corrupt.get()
        if bad is not None and bad[0] == op:
            backward_fn = _scaled(backward_fn, bad[1])
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _scaled(fn, factor):
    def bw(g):
        return tuple(None if pg is None else pg * factor for pg in fn(g))

    return bw


def tape(loss: Tensor) -> list[Tensor]:
    """Interior nodes reachable from ``loss`` in reverse creation order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen or node._backward is None:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss does not depend on any tensor requiring grad")
    nodes = tape(loss)
    if not nodes:
        loss.grad = loss.grad + np.ones_like(loss.data)
        return
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node._retain:
            node.grad = g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node.op} backward", pg.shape, parent.shape)
            if not np.all(np.isfinite(pg)):
                raise NumericFault(node.op, "backward")
            if parent._backward is None:
                parent.grad = parent.grad + pg.astype(parent.data.dtype, copy=False)
            else:
                key = id(parent)
                prev = adj.get(key)
                adj[key] = pg if prev is None else prev + pg
