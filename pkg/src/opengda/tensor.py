"""Reverse-mode differentiation over dense float64 matrices.

Every operation appends a :class:`ValueNode` to a :class:`Tape`. Nodes keep
their value and their gradient after :meth:`Tape.backward`, so intermediate
quantities (mask nodes in particular) can be read back directly.

Backward rules live in ``_BACKWARD``, keyed by the op tag stored on the node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class StateError(RuntimeError):
    """An object is missing state required by the operation."""


@dataclass(eq=False)
class ValueNode:
    id: int
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    ctx: dict[str, Any] = field(default_factory=dict)
    # allocated on first accumulation
    _grad: np.ndarray | None = field(default=None, repr=False)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


def _as_matrix(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got array with shape {arr.shape}")
    return arr


class Tape:
    """Ordered record of a computation; nodes are appended in topological order."""

    def __init__(self) -> None:
        self.nodes: list[ValueNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op, value, parents=(), requires_grad=None, **ctx) -> ValueNode:
        parent_nodes = [self.nodes[p.id] for p in parents]
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parent_nodes)
        node = ValueNode(
            id=len(self.nodes),
            op=op,
            parents=tuple(p.id for p in parent_nodes),
            value=value,
            requires_grad=requires_grad,
            ctx=ctx,
        )
        self.nodes.append(node)
        return node

    def _check(self, *nodes: ValueNode) -> None:
        for n in nodes:
            if n.id >= len(self.nodes) or self.nodes[n.id] is not n:
                raise StateError(f"node {n.id} does not belong to this tape")

    # leaves

    def param(self, value) -> ValueNode:
        """Leaf whose gradient is tracked."""
        return self._push("leaf", _as_matrix(value), requires_grad=True)

    def const(self, value) -> ValueNode:
        """Leaf that never receives a gradient."""
        return self._push("const", _as_matrix(value), requires_grad=False)

    # binary ops

    def matmul(self, a: ValueNode, b: ValueNode) -> ValueNode:
        self._check(a, b)
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return self._push("matmul", a.value @ b.value, (a, b))

    def spmm(self, adj, x: ValueNode) -> ValueNode:
        """Propagate ``x`` with the cached symmetric-normalized adjacency of ``adj``."""
        self._check(x)
        if adj.n != x.shape[0]:
            raise ShapeError(f"spmm: adjacency has {adj.n} nodes, input has shape {x.shape}")
        op = adj.operator()
        return self._push("spmm", np.asarray(op @ x.value), (x,), adj=adj, operator=op)

    def mul(self, a: ValueNode, b: ValueNode) -> ValueNode:
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"elementwise_mul: shapes {a.shape} and {b.shape} differ")
        return self._push("mul", a.value * b.value, (a, b))

    def add(self, a: ValueNode, b: ValueNode) -> ValueNode:
        self._check(a, b)
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return self._push("add", a.value + b.value, (a, b))

    def concat_cols(self, a: ValueNode, b: ValueNode) -> ValueNode:
        self._check(a, b)
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"concat_cols: row counts of {a.shape} and {b.shape} differ")
        return self._push("concat_cols", np.hstack([a.value, b.value]), (a, b), split=a.shape[1])

    def concat_rows(self, a: ValueNode, b: ValueNode) -> ValueNode:
        self._check(a, b)
        if a.shape[1] != b.shape[1]:
            raise ShapeError(f"concat_rows: column counts of {a.shape} and {b.shape} differ")
        return self._push("concat_rows", np.vstack([a.value, b.value]), (a, b), split=a.shape[0])

    # unary ops

    def scalar_mul(self, a: ValueNode, c: float) -> ValueNode:
        self._check(a)
        return self._push("scalar_mul", a.value * c, (a,), c=float(c))

    def relu(self, a: ValueNode, slope: float = 0.0) -> ValueNode:
        """ReLU, or LeakyReLU when ``slope`` is nonzero."""
        self._check(a)
        if a.value.size == 0:
            raise ShapeError("relu: empty matrix")
        pos = a.value > 0
        out = np.where(pos, a.value, slope * a.value) if slope else np.where(pos, a.value, 0.0)
        return self._push("relu", out, (a,), pos=pos, slope=float(slope))

    def exp(self, a: ValueNode) -> ValueNode:
        self._check(a)
        return self._push("exp", np.exp(a.value), (a,))

    def log_softmax_rows(self, a: ValueNode) -> ValueNode:
        self._check(a)
        if a.value.size == 0 or a.shape[1] < 1:
            raise ShapeError(f"log_softmax_rows: empty matrix {a.shape}")
        shifted = a.value - a.value.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return self._push("log_softmax", out, (a,))

    def gather_cols(self, a: ValueNode, index) -> ValueNode:
        """Pick ``a[i, index[i, j]]`` for every row ``i``; output shape is ``index.shape``."""
        self._check(a)
        index = np.asarray(index, dtype=np.int64)
        if index.ndim != 2 or index.shape[0] != a.shape[0]:
            raise ShapeError(f"gather_cols: index shape {index.shape} does not fit {a.shape}")
        rows = np.arange(a.shape[0])[:, None]
        return self._push("gather_cols", a.value[rows, index], (a,), index=index)

    def take_rows(self, a: ValueNode, index) -> ValueNode:
        self._check(a)
        index = np.asarray(index, dtype=np.int64).ravel()
        return self._push("take_rows", a.value[index], (a,), index=index)

    def grad_reverse(self, a: ValueNode, scale: float = 1.0) -> ValueNode:
        """Identity forward; backward passes ``-scale`` times the upstream gradient."""
        self._check(a)
        if scale < 0:
            raise ValueError("grad_reverse: scale must be >= 0")
        return self._push("grad_reverse", a.value.copy(), (a,), scale=float(scale))

    def row_sum(self, a: ValueNode) -> ValueNode:
        self._check(a)
        if a.value.size == 0:
            raise ShapeError("row_sum: empty matrix")
        return self._push("row_sum", a.value.sum(axis=1, keepdims=True), (a,))

    def sum_all(self, a: ValueNode) -> ValueNode:
        self._check(a)
        if a.value.size == 0:
            raise ShapeError("sum_all: empty matrix")
        return self._push("sum_all", np.array([[a.value.sum()]]), (a,))

    def mean_all(self, a: ValueNode) -> ValueNode:
        self._check(a)
        if a.value.size == 0:
            raise ShapeError("mean_all: empty matrix")
        return self._push("mean_all", np.array([[a.value.mean()]]), (a,))

    # backward

    def backward(self, loss: ValueNode) -> None:
        self._check(loss)
        if loss.shape != (1, 1):
            raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
        self._acc(loss.id, np.ones((1, 1)))
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.op in ("leaf", "const") or not node.requires_grad:
                continue
            if node._grad is None or not node._grad.any():
                continue
            _BACKWARD[node.op](self, node)

    def _acc(self, pid: int, g: np.ndarray) -> None:
        parent = self.nodes[pid]
        if not parent.requires_grad:
            return
        if parent._grad is None:
            parent._grad = np.array(g, dtype=np.float64)
        else:
            parent._grad += g


def _bw_matmul(t: Tape, n: ValueNode) -> None:
    a, b = (t.nodes[p] for p in n.parents)
    if a.requires_grad:
        t._acc(a.id, n.grad @ b.value.T)
    if b.requires_grad:
        t._acc(b.id, a.value.T @ n.grad)


def _bw_spmm(t: Tape, n: ValueNode) -> None:
    # normalized adjacency is symmetric
    t._acc(n.parents[0], np.asarray(n.ctx["operator"] @ n.grad))


def _bw_mul(t: Tape, n: ValueNode) -> None:
    a, b = (t.nodes[p] for p in n.parents)
    t._acc(a.id, n.grad * b.value)
    t._acc(b.id, n.grad * a.value)


def _bw_add(t: Tape, n: ValueNode) -> None:
    for p in n.parents:
        t._acc(p, n.grad)


def _bw_concat_cols(t: Tape, n: ValueNode) -> None:
    k = n.ctx["split"]
    t._acc(n.parents[0], n.grad[:, :k])
    t._acc(n.parents[1], n.grad[:, k:])


def _bw_concat_rows(t: Tape, n: ValueNode) -> None:
    k = n.ctx["split"]
    t._acc(n.parents[0], n.grad[:k])
    t._acc(n.parents[1], n.grad[k:])


def _bw_scalar_mul(t: Tape, n: ValueNode) -> None:
    t._acc(n.parents[0], n.grad * n.ctx["c"])


def _bw_relu(t: Tape, n: ValueNode) -> None:
    slope = n.ctx["slope"]
    t._acc(n.parents[0], np.where(n.ctx["pos"], n.grad, slope * n.grad))


def _bw_exp(t: Tape, n: ValueNode) -> None:
    t._acc(n.parents[0], n.grad * n.value)


def _bw_log_softmax(t: Tape, n: ValueNode) -> None:
    soft = np.exp(n.value)
    t._acc(n.parents[0], n.grad - soft * n.grad.sum(axis=1, keepdims=True))


def _bw_gather_cols(t: Tape, n: ValueNode) -> None:
    a = t.nodes[n.parents[0]]
    g = np.zeros_like(a.value)
    rows = np.broadcast_to(np.arange(a.shape[0])[:, None], n.ctx["index"].shape)
    np.add.at(g, (rows, n.ctx["index"]), n.grad)
    t._acc(a.id, g)


def _bw_take_rows(t: Tape, n: ValueNode) -> None:
    a = t.nodes[n.parents[0]]
    g = np.zeros_like(a.value)
    np.add.at(g, n.ctx["index"], n.grad)
    t._acc(a.id, g)


def _bw_grad_reverse(t: Tape, n: ValueNode) -> None:
    t._acc(n.parents[0], -n.ctx["scale"] * n.grad)


def _bw_row_sum(t: Tape, n: ValueNode) -> None:
    a = t.nodes[n.parents[0]]
    t._acc(a.id, np.broadcast_to(n.grad, a.shape))


def _bw_sum_all(t: Tape, n: ValueNode) -> None:
    a = t.nodes[n.parents[0]]
    t._acc(a.id, np.full(a.shape, n.grad[0, 0]))


def _bw_mean_all(t: Tape, n: ValueNode) -> None:
    a = t.nodes[n.parents[0]]
    t._acc(a.id, np.full(a.shape, n.grad[0, 0] / a.value.size))


_BACKWARD: dict[str, Callable[[Tape, ValueNode], None]] = {
    "matmul": _bw_matmul,
    "spmm": _bw_spmm,
    "mul": _bw_mul,
    "add": _bw_add,
    "concat_cols": _bw_concat_cols,
    "concat_rows": _bw_concat_rows,
    "scalar_mul": _bw_scalar_mul,
    "relu": _bw_relu,
    "exp": _bw_exp,
    "log_softmax": _bw_log_softmax,
    "gather_cols": _bw_gather_cols,
    "take_rows": _bw_take_rows,
    "grad_reverse": _bw_grad_reverse,
    "row_sum": _bw_row_sum,
    "sum_all": _bw_sum_all,
    "mean_all": _bw_mean_all,
}
