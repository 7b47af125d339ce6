"""Dense float64 tensors recorded on a reverse-mode gradient tape.

A :class:`Tape` owns an append-only list of nodes.  Nodes are appended as
they are created, so the list is already in topological order and the
backward sweep is a single reverse pass that touches each node once.
Parameters are leaves registered under a hashable id; ``Tape.backward``
returns a gradient for every registered parameter (zeros when unreachable).

Only the batch dimension broadcasts: a 1-D row may be added to or multiplied
with every row of a 2-D operand.
"""

from __future__ import annotations

from typing import Callable, Hashable

import numpy as np

from . import _kernels

LOG_EPS = _kernels.LOG_EPS


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "id", "op", "inputs", "requires_grad", "_vjp")

    def __init__(self, data: np.ndarray, tape: "Tape", op: str = "leaf", inputs=(), vjp=None,
                 requires_grad: bool = False):
        self.data = data
        self.tape = tape
        self.op = op
        self.inputs = inputs
        self.requires_grad = requires_grad
        self._vjp: Callable | None = vjp
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[Hashable, Tensor] = {}

    def param(self, pid: Hashable, value: np.ndarray, requires_grad: bool = True) -> Tensor:
        """Leaf for parameter ``pid``; repeated calls return the same node."""
        node = self.params.get(pid)
        if node is None:
            node = Tensor(np.asarray(value, dtype=np.float64), self, requires_grad=requires_grad)
            self.params[pid] = node
        return node

    def const(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self)

    def backward(self, root: Tensor) -> dict[Hashable, np.ndarray]:
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: list[np.ndarray | None] = [None] * (root.id + 1)
        grads[root.id] = np.ones_like(root.data)
        for nid in range(root.id, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node._vjp is None:
                continue
            for inp, gi in zip(node.inputs, node._vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if grads[inp.id] is None:
                    grads[inp.id] = gi
                else:
                    grads[inp.id] = grads[inp.id] + gi
        out = {}
        for pid, leaf in self.params.items():
            g = grads[leaf.id] if leaf.id <= root.id else None
            out[pid] = np.zeros_like(leaf.data) if g is None else g
        return out


def _check(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return data


def _node(data, op, inputs, vjp) -> Tensor:
    data = _check(data, op)
    req = any(t.requires_grad for t in inputs)
    return Tensor(data, inputs[0].tape, op, inputs if req else (), vjp if req else None, req)


def _lift(a: Tensor, b) -> Tensor:
    return b if isinstance(b, Tensor) else a.tape.const(b)


def _broadcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> bool:
    """True when ``b`` is a row broadcast across the batch rows of ``a``."""
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _node(A @ B, "matmul", (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b) -> Tensor:
    b = _lift(a, b)
    row = _broadcast_kind(a.data, b.data, "add")
    return _node(a.data + b.data, "add", (a, b), lambda g: (g, g.sum(axis=0) if row else g))


def sub(a: Tensor, b) -> Tensor:
    b = _lift(a, b)
    row = _broadcast_kind(a.data, b.data, "sub")
    return _node(a.data - b.data, "sub", (a, b), lambda g: (g, -(g.sum(axis=0) if row else g)))


def mul(a: Tensor, b) -> Tensor:
    b = _lift(a, b)
    A, B = a.data, b.data
    row = _broadcast_kind(A, B, "mul")
    return _node(A * B, "mul", (a, b),
                 lambda g: (g * B, (g * A).sum(axis=0) if row else g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _node(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.array(a.data.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def mean_batch(a: Tensor) -> Tensor:
    """Mean over the leading (batch) axis."""
    n = a.shape[0]
    shape = a.shape
    return _node(a.data.mean(axis=0), "mean", (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    if a.data.shape[-1] == 0 or a.data.size == 0:
        raise ShapeError("softmax of an empty tensor")
    z = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    p = _kernels.softmax_rows(np.ascontiguousarray(z)).reshape(a.shape)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, "softmax", (a,), vjp)


def log(a: Tensor) -> Tensor:
    """``log(max(a, 1e-12))``; the gradient is zero where the clamp is active."""
    x = a.data
    live = x > LOG_EPS
    safe = np.where(live, x, LOG_EPS)
    return _node(np.log(safe), "log", (a,), lambda g: (np.where(live, g / safe, 0.0),))


def pick(a: Tensor, index) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]``."""
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: need 2-D input and one index per row, got {a.shape}, {idx.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _node(a.data[rows, idx], "pick", (a,), vjp)
