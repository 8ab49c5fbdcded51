"""Reverse-mode automatic differentiation over dense float64 matrices.

Values are plain 2-D numpy arrays (row-major, 64-bit). Every differentiable
operation is recorded on an explicit :class:`Tape`; the backward pass walks
the recorded nodes once, in reverse insertion order, accumulating adjoints.
The tape is rebuilt for every training step, so there is no graph reuse or
retained state between steps.

numpy supplies the dense kernels (matmul, reductions); the differentiation
machinery itself lives here.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import NumericError, ShapeError


def as_matrix(value) -> np.ndarray:
    """Coerce ``value`` to a 2-D float64 array.

    Scalars become 1x1, 1-D arrays become a single row. Zero-extent shapes
    are rejected: empty operands are never meaningful here and silently
    propagating them hides dimension bugs.
    """
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"zero-extent matrix {arr.shape} is not allowed")
    return np.ascontiguousarray(arr)


def _require_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NumericError(
            f"{op} produced a non-finite value at ({bad[0]}, {bad[1]})"
        )
    return arr


class Node:
    """One recorded value on the tape."""

    __slots__ = ("value", "index", "op", "parents", "grad", "_push")

    def __init__(self, value, index, op, parents, push):
        self.value: np.ndarray = value
        self.index: int = index
        self.op: str = op
        self.parents: tuple[Node, ...] = parents
        self.grad: Optional[np.ndarray] = None
        self._push: Optional[Callable[[np.ndarray], None]] = push

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, index={self.index}, shape={self.value.shape})"


def _accumulate(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


class Tape:
    """Append-only record of a differentiable computation.

    Inputs of a node always come from strictly earlier nodes, so the node
    list is already a topological order and :meth:`backward` can simply walk
    it once in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def _same_shape(a: Node, b: Node, op: str) -> None:
        if a.value.shape != b.value.shape:
            raise ShapeError(
                f"{op} needs matching shapes, got {a.value.shape} and "
                f"{b.value.shape}"
            )

    def _record(self, value, op, parents=(), push=None) -> Node:
        value = _require_finite(as_matrix(value), op)
        node = Node(value, len(self.nodes), op, tuple(parents), push)
        self.nodes.append(node)
        return node

    # -- leaves ---------------------------------------------------------

    def leaf(self, value, op: str = "leaf") -> Node:
        """Record an input value (parameter or constant)."""
        return self._record(value, op)

    def constant(self, value) -> Node:
        return self.leaf(value, op="const")

    # -- binary ops -----------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeError(
                f"matmul mismatch: {a.value.shape} x {b.value.shape}"
            )
        av, bv = a.value, b.value

        def push(g):
            _accumulate(a, g @ bv.T)
            _accumulate(b, av.T @ g)

        return self._record(av @ bv, "matmul", (a, b), push)

    def add(self, a: Node, b: Node) -> Node:
        self._same_shape(a, b, "add")

        def push(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return self._record(a.value + b.value, "add", (a, b), push)

    def sub(self, a: Node, b: Node) -> Node:
        self._same_shape(a, b, "sub")

        def push(g):
            _accumulate(a, g)
            _accumulate(b, -g)

        return self._record(a.value - b.value, "sub", (a, b), push)

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product of same-shape operands."""
        self._same_shape(a, b, "mul")
        av, bv = a.value, b.value

        def push(g):
            _accumulate(a, g * bv)
            _accumulate(b, g * av)

        return self._record(av * bv, "mul", (a, b), push)

    def add_rowvec(self, a: Node, row: Node) -> Node:
        """Add a 1 x cols row vector to every row of ``a`` (bias add)."""
        if row.value.shape != (1, a.value.shape[1]):
            raise ShapeError(
                f"add_rowvec needs a (1, {a.value.shape[1]}) row, "
                f"got {row.value.shape}"
            )

        def push(g):
            _accumulate(a, g)
            _accumulate(row, g.sum(axis=0, keepdims=True))

        return self._record(a.value + row.value, "add_rowvec", (a, row), push)

    def concat_cols(self, a: Node, b: Node) -> Node:
        if a.value.shape[0] != b.value.shape[0]:
            raise ShapeError(
                f"concat_cols row mismatch: {a.value.shape} vs {b.value.shape}"
            )
        ca = a.value.shape[1]

        def push(g):
            _accumulate(a, g[:, :ca])
            _accumulate(b, g[:, ca:])

        return self._record(
            np.hstack([a.value, b.value]), "concat_cols", (a, b), push
        )

    # -- unary ops ------------------------------------------------------

    def scale(self, a: Node, factor: float) -> Node:
        factor = float(factor)

        def push(g):
            _accumulate(a, g * factor)

        return self._record(a.value * factor, "scale", (a,), push)

    def add_scalar(self, a: Node, offset: float) -> Node:
        offset = float(offset)

        def push(g):
            _accumulate(a, g)

        return self._record(a.value + offset, "add_scalar", (a,), push)

    def relu(self, a: Node) -> Node:
        mask = a.value > 0.0

        def push(g):
            _accumulate(a, g * mask)

        return self._record(np.where(mask, a.value, 0.0), "relu", (a,), push)

    def log(self, a: Node) -> Node:
        if np.any(a.value <= 0.0):
            bad = np.argwhere(a.value <= 0.0)[0]
            raise NumericError(
                f"log of non-positive entry {a.value[bad[0], bad[1]]!r} "
                f"at ({bad[0]}, {bad[1]})"
            )
        av = a.value

        def push(g):
            _accumulate(a, g / av)

        return self._record(np.log(av), "log", (a,), push)

    def square(self, a: Node) -> Node:
        av = a.value

        def push(g):
            _accumulate(a, 2.0 * av * g)

        return self._record(av * av, "square", (a,), push)

    def clamp_min(self, a: Node, floor: float) -> Node:
        """max(a, floor); gradient passes only where a >= floor."""
        floor = float(floor)
        mask = a.value >= floor

        def push(g):
            _accumulate(a, g * mask)

        return self._record(
            np.maximum(a.value, floor), "clamp_min", (a,), push
        )

    # -- reductions -----------------------------------------------------

    def reduce_mean(self, a: Node) -> Node:
        """Column means over the batch (row) axis: (n, c) -> (1, c)."""
        rows = a.value.shape[0]
        shape = a.value.shape

        def push(g):
            _accumulate(a, np.broadcast_to(g / rows, shape))

        return self._record(
            a.value.mean(axis=0, keepdims=True), "reduce_mean", (a,), push
        )

    def reduce_var(self, a: Node) -> Node:
        """Population (1/n) column variances over the batch axis."""
        rows = a.value.shape[0]
        centered = a.value - a.value.mean(axis=0, keepdims=True)

        def push(g):
            _accumulate(a, g * (2.0 / rows) * centered)

        return self._record(
            (centered * centered).mean(axis=0, keepdims=True),
            "reduce_var",
            (a,),
            push,
        )

    def reduce_sum(self, a: Node, axis: Optional[int] = None) -> Node:
        if axis not in (None, 0):
            raise ShapeError(f"reduce_sum supports axis None or 0, got {axis}")
        shape = a.value.shape

        def push(g):
            _accumulate(a, np.broadcast_to(g, shape))

        if axis is None:
            value = a.value.sum().reshape(1, 1)
        else:
            value = a.value.sum(axis=0, keepdims=True)
        return self._record(value, "reduce_sum", (a,), push)

    # -- backward -------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Populate adjoints for every node reachable from ``loss``.

        The loss must be scalar (1x1). Parameter values are untouched;
        gradients are read back via :meth:`grad`.
        """
        if loss.value.shape != (1, 1):
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.value.shape}"
            )
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is not None and node._push is not None:
                node._push(node.grad)

    def grad(self, node: Node) -> np.ndarray:
        """Adjoint of ``node`` after :meth:`backward`; zeros if the loss
        does not depend on it."""
        if node.grad is None:
            return np.zeros_like(node.value)
        return node.grad
