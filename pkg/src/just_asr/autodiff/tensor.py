"""Tensor and tape for reverse-mode differentiation over numpy buffers.

Every differentiable operation records one node on the active :class:`Tape`.
Calling :meth:`Tensor.backward` on a scalar replays the tape in reverse
creation order, which is a valid topological order because a node can only
be created after all of its inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DTYPES: list[type] = [np.float32]


def default_dtype() -> type:
    return _DTYPES[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors."""
    _DTYPES.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPES.pop()


def high_precision():
    """Double-width mode; finite-difference checks only make sense here."""
    return precision(np.float64)


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Tapes are single use: after ``backward`` the saved activations are dropped
    and the tape refuses further replays.
    """

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        if self.consumed:
            raise TapeError("tape already replayed; run a fresh forward pass")
        if loss._tape is not self:
            raise TapeError("tensor was not recorded on this tape")
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent._accumulate(pg)
                else:
                    key = id(parent)
                    pending[key] = pending[key] + pg if key in pending else pg
        self.clear()

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
            node._tape = None
        self.nodes = []
        self.consumed = True


class Tensor:
    """Dense row-major array with optional gradient tracking.

    Leaves are created by the user; non-leaf tensors come out of ops recorded
    on a tape.  ``grad`` is only populated on leaves and accumulates across
    backward passes until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tape", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = "") -> None:
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._tape = None
        out.name = ""
        return out

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        g = g.astype(self.data.dtype, copy=False)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if self._tape is None:
            raise TapeError("backward on a tensor not produced under an active tape")
        self._tape.backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

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
        return ops.slice(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result and put it on the active tape when gradients are needed."""
    out = Tensor._wrap(data)
    tape = Tape.active()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._tape = tape
        tape.nodes.append(out)
    return out
