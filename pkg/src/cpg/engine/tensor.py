"""Dense float64 tensors with a reverse-mode tape.

Every differentiable op appends one node to the current thread's tape.
``backward`` walks the tape in reverse recording order, which is already a
topological order, so each node is visited exactly once.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {msg}")


class DomainError(ValueError):
    """Input lies outside an op's mathematical domain (log of <=0, x/0, NaN)."""


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops for one execution context."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0

    def __len__(self):
        return len(self.nodes)

    def record(self, out: "Tensor", parents, backward) -> None:
        out._node = len(self.nodes)
        out._gen = self.generation
        out._tape = self
        self.nodes.append(_Node(out, parents, backward))

    def owns(self, t: "Tensor") -> bool:
        return t._tape is self and t._gen == self.generation and t._node is not None

    def reset(self) -> None:
        """Drop every recorded node so intermediate buffers can be freed."""
        for n in self.nodes:
            n.out._node = None
            n.out._tape = None
        self.nodes = []
        self.generation += 1


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    """Row-major float64 array with an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` start with a zero
    gradient, so parameters unreachable from a loss keep an all-zero grad.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_gen", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._node = None
        self._gen = -1
        self._tape = None

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.data.shape[0]

    def backward(self) -> None:
        backward(self)

    # --- operator sugar (implemented in ops) ------------------------------
    def __add__(self, o):
        from . import ops
        return ops.add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        from . import ops
        return ops.sub(self, o)

    def __rsub__(self, o):
        from . import ops
        return ops.sub(o, self)

    def __mul__(self, o):
        from . import ops
        return ops.mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        from . import ops
        return ops.div(self, o)

    def __rtruediv__(self, o):
        from . import ops
        return ops.div(o, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, o):
        from . import ops
        return ops.matmul(self, o)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

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
        return ops.reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.reduce_mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(out_data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op result and record it if any parent needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(out_data, dtype=np.float64)
    out.grad = None
    out.name = None
    out._node = None
    out._gen = -1
    out._tape = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        get_tape().record(out, tuple(parents), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from scalar ``loss``.

    Gradients are summed over all paths. The tape is reset afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    tape = get_tape()
    if not loss.requires_grad:
        return
    if not tape.owns(loss):
        raise RuntimeError("loss was not recorded on the current tape")
    grads: list = [None] * (loss._node + 1)
    grads[loss._node] = np.ones_like(loss.data)
    nodes = tape.nodes
    for idx in range(loss._node, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        grads[idx] = None
        node = nodes[idx]
        pgrads = node.backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if tape.owns(p):
                j = p._node
                if grads[j] is None:
                    grads[j] = pg
                else:
                    grads[j] = grads[j] + pg
            else:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += pg
    tape.reset()
