"""Dense tensors with a reverse-mode gradient tape."""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AutogradError

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on any tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One recorded differentiable operation.

    ``backward_fn`` receives the output gradient and returns one gradient
    (or ``None``) per entry of ``parents``.
    """

    __slots__ = ("seq", "parents", "backward_fn", "op")

    def __init__(self, parents, backward_fn, op):
        self.seq = next(_counter)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """An n-dimensional array that may be linked into a gradient tape.

    Leaf tensors created with ``requires_grad=True`` accumulate ``.grad``
    during :func:`backward`. Tensors produced by an op whose inputs require
    gradients carry a ``node`` pointing back at that op.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

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
    def grad_link(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # small arithmetic surface used by losses and tests
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from . import ops
        return ops.total(self)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording a node if any parent needs gradients."""
    out = Tensor(data)
    if _grad_enabled and any(p.grad_link for p in parents):
        out.node = Node(tuple(parents), backward_fn, op)
    return out


class Tape:
    """Operations reachable from a loss, in execution order."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        found = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(p for p in t.node.parents if p.node is not None)
        found.sort(key=lambda t: t.node.seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.tensors)

    def ops(self) -> list[str]:
        return [t.node.op for t in self.tensors]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring it."""
    if not loss.grad_link:
        raise AutogradError("backward() called on a tensor with no gradient link")
    if loss.data.size != 1:
        raise AutogradError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return

    tape = Tape.from_output(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        grads = t.node.backward_fn(g)
        for parent, pg in zip(t.node.parents, grads):
            if pg is None or not parent.grad_link:
                continue
            if parent.node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
