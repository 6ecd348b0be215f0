"""Dense tensors with a reverse-mode gradient tape.

Every op in :mod:`vptlab.numerics.functional` returns a new :class:`Tensor`
that remembers its parents and a closure computing the parents' gradients.
:meth:`Tensor.backward` walks that graph once in reverse topological order and
then drops the references, so the tape lives for exactly one training step.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from vptlab.errors import NumericError, ShapeError, UsageError



class _Mode(threading.local):
    # per-thread, so concurrent decode sessions cannot flip each other's flags
    grad_enabled = True
    dtype: type = np.float32


_MODE = _Mode()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def get_dtype() -> type:
    return _MODE.dtype


def is_grad_enabled() -> bool:
    return _MODE.grad_enabled


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors.

    ``precision(np.float64)`` is the gradient-check mode; everything else runs
    in float32.
    """
    old = _MODE.dtype
    _MODE.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _MODE.dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording (inference and frozen-module forward passes)."""
    old = _MODE.grad_enabled
    _MODE.grad_enabled = False
    try:
        yield
    finally:
        _MODE.grad_enabled = old


class Tensor:
    """An n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _MODE.dtype, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        needs = _MODE.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @classmethod
    def wrap(cls, value) -> "Tensor":
        """Return ``value`` unchanged if it is a Tensor, else a constant Tensor."""
        if isinstance(value, Tensor):
            return value
        out = cls.__new__(cls)
        out.data = np.asarray(value, dtype=_MODE.dtype)
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    # array-like surface ---------------------------------------------------

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what}")
        return self

    # operators delegate to functional ------------------------------------

    def __add__(self, other):
        from vptlab.numerics import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from vptlab.numerics import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from vptlab.numerics import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from vptlab.numerics import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from vptlab.numerics import functional as F
        return F.div(self, other)

    def __neg__(self):
        from vptlab.numerics import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from vptlab.numerics import functional as F
        return F.matmul(self, other)

    def __getitem__(self, idx):
        from vptlab.numerics import functional as F
        return F.getitem(self, idx)

    def reshape(self, *shape):
        from vptlab.numerics import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from vptlab.numerics import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from vptlab.numerics import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from vptlab.numerics import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    # autodiff -------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient.

        Leaf gradients accumulate across calls; clear them with
        ``zero_grad`` between optimizer steps. The recorded graph is released
        afterwards.
        """
        if not self.requires_grad:
            raise UsageError("backward() on a tensor with no recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        elif grad.shape != self.data.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != {self.data.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None

    def zero_grad(self) -> None:
        self.grad = None


class Parameter(Tensor):
    """A leaf tensor that is trainable unless explicitly frozen."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape}, requires_grad={self.requires_grad})"
