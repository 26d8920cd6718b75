"""Reverse-mode automatic differentiation on a recorded tape of dense ops.

A :class:`Tape` is built once as a static graph of named leaves and primitive
ops, then evaluated any number of times with :meth:`Tape.forward` and
differentiated with :meth:`Tape.backward`.  Tensors are plain ``float64``
numpy arrays; shapes are fixed at graph-construction time.

Example::

    tape = Tape()
    x = tape.input("x", (1, 2))
    w = tape.input("w", (2, 3))
    y = tape.sum(tape.tanh(tape.matmul(x, w)))
    tape.set_outputs(y)
    tape.forward({"x": ..., "w": ...})
    grads = tape.backward(1.0)   # {"x": ..., "w": ...}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "Node",
    "Tape",
    "as_tensor",
    "leaky_relu",
    "leaky_relu_grad",
]

OP_KINDS = (
    "input",
    "matmul",
    "add",
    "tanh",
    "leaky_relu",
    "scale",
    "sum",
    "mean",
    "square",
    "sqrt",
)


class AutodiffError(ValueError):
    """Base class for tape errors."""


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op_index: int, kind: str):
        super().__init__(f"non-finite value produced by op #{op_index} ({kind})")
        self.op_index = op_index
        self.kind = kind


def as_tensor(value, shape: Sequence[int] | None = None) -> np.ndarray:
    """Convert ``value`` to a contiguous float64 array, optionally checking its shape."""
    # ascontiguousarray would promote 0-d scalars to 1-d
    arr = np.asarray(value, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    # derivative at exactly 0 is taken from the positive side
    return np.where(x >= 0.0, 1.0, slope)


@dataclass(frozen=True)
class Node:
    """Handle to a value recorded on a tape."""

    index: int
    shape: tuple[int, ...]


@dataclass
class _Record:
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attr: float | None = None
    name: str | None = None


@dataclass
class Tape:
    records: list[_Record] = field(default_factory=list)
    leaves: dict[str, int] = field(default_factory=dict)
    outputs: tuple[int, ...] = ()

    def __post_init__(self):
        self._values: list[np.ndarray] | None = None

    # -- graph construction -------------------------------------------------

    def _push(self, kind, inputs, shape, attr=None, name=None) -> Node:
        if kind not in OP_KINDS:
            raise AutodiffError(f"unsupported op kind {kind!r}")
        self.records.append(_Record(kind, tuple(n.index for n in inputs), tuple(shape), attr, name))
        self._values = None
        return Node(len(self.records) - 1, tuple(shape))

    def input(self, name: str, shape: Sequence[int]) -> Node:
        if name in self.leaves:
            raise AutodiffError(f"duplicate input name {name!r}")
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"input {name!r} has non-positive dimension {shape}")
        node = self._push("input", (), shape, name=name)
        self.leaves[name] = node.index
        return node

    def matmul(self, a: Node, b: Node) -> Node:
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul of {a.shape} and {b.shape}")
        return self._push("matmul", (a, b), (a.shape[0], b.shape[1]))

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise add; ``b`` may also be a bias broadcast along the last axis of ``a``."""
        if a.shape != b.shape and not (len(b.shape) == 1 and a.shape and a.shape[-1] == b.shape[0]):
            raise ShapeError(f"add of {a.shape} and {b.shape}")
        return self._push("add", (a, b), a.shape)

    def tanh(self, a: Node) -> Node:
        return self._push("tanh", (a,), a.shape)

    def leaky_relu(self, a: Node, slope: float = 0.2) -> Node:
        return self._push("leaky_relu", (a,), a.shape, attr=float(slope))

    def scale(self, a: Node, c: float) -> Node:
        return self._push("scale", (a,), a.shape, attr=float(c))

    def sum(self, a: Node) -> Node:
        return self._push("sum", (a,), ())

    def mean(self, a: Node) -> Node:
        return self._push("mean", (a,), ())

    def square(self, a: Node) -> Node:
        return self._push("square", (a,), a.shape)

    def sqrt(self, a: Node) -> Node:
        return self._push("sqrt", (a,), a.shape)

    def set_outputs(self, *nodes: Node) -> None:
        if not nodes:
            raise AutodiffError("a tape needs at least one output")
        self.outputs = tuple(n.index for n in nodes)

    def input_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: self.records[i].shape for name, i in self.leaves.items()}

    # -- evaluation ---------------------------------------------------------

    def forward(self, inputs: Mapping[str, np.ndarray]) -> list[np.ndarray]:
        """Evaluate the graph; returns the output values in ``set_outputs`` order."""
        if not self.outputs:
            raise AutodiffError("outputs not set")
        missing = set(self.leaves) - set(inputs)
        extra = set(inputs) - set(self.leaves)
        if missing or extra:
            raise ShapeError(f"input names mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        vals: list[np.ndarray] = []
        for k, rec in enumerate(self.records):
            if rec.kind == "input":
                v = as_tensor(inputs[rec.name])
                if v.shape != rec.shape:
                    raise ShapeError(f"input {rec.name!r}: expected shape {rec.shape}, got {v.shape}")
            else:
                args = [vals[i] for i in rec.inputs]
                with np.errstate(all="ignore"):
                    v = _FORWARD[rec.kind](rec, *args)
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(k, rec.kind)
            vals.append(v)
        self._values = vals
        return [vals[i] for i in self.outputs]

    def backward(self, cotangent) -> dict[str, np.ndarray]:
        """Vector-Jacobian product of the outputs, contracted with ``cotangent``.

        ``cotangent`` matches the single output's shape, or is a sequence with
        one entry per output.  Returns gradients keyed by input name.
        """
        if self._values is None:
            raise AutodiffError("backward called before forward")
        vals = self._values
        if len(self.outputs) == 1:
            cots = [cotangent]
        else:
            cots = list(cotangent)
            if len(cots) != len(self.outputs):
                raise ShapeError("one cotangent per output required")
        adj: list[np.ndarray | None] = [None] * len(self.records)
        for idx, cot in zip(self.outputs, cots):
            cot = as_tensor(cot)
            if cot.shape != self.records[idx].shape:
                raise ShapeError(
                    f"cotangent shape {cot.shape} does not match output shape {self.records[idx].shape}"
                )
            adj[idx] = cot if adj[idx] is None else adj[idx] + cot
        for k in range(len(self.records) - 1, -1, -1):
            rec = self.records[k]
            g = adj[k]
            if g is None or rec.kind == "input":
                continue
            args = [vals[i] for i in rec.inputs]
            with np.errstate(all="ignore"):
                grads = _VJP[rec.kind](rec, g, vals[k], *args)
            for i, gi in zip(rec.inputs, grads):
                adj[i] = gi if adj[i] is None else adj[i] + gi
        out = {}
        for name, i in self.leaves.items():
            out[name] = adj[i] if adj[i] is not None else np.zeros(self.records[i].shape)
        return out


def _fw_add(rec, a, b):
    return a + b


_FORWARD = {
    "matmul": lambda rec, a, b: a @ b,
    "add": _fw_add,
    "tanh": lambda rec, a: np.tanh(a),
    "leaky_relu": lambda rec, a: leaky_relu(a, rec.attr),
    "scale": lambda rec, a: rec.attr * a,
    "sum": lambda rec, a: np.asarray(a.sum()),
    "mean": lambda rec, a: np.asarray(a.mean()),
    "square": lambda rec, a: a * a,
    "sqrt": lambda rec, a: np.sqrt(a),
}


def _vjp_add(rec, g, out, a, b):
    gb = g if b.shape == a.shape else g.reshape(-1, b.shape[0]).sum(axis=0)
    return g, gb


_VJP = {
    "matmul": lambda rec, g, out, a, b: (g @ b.T, a.T @ g),
    "add": _vjp_add,
    "tanh": lambda rec, g, out, a: (g * (1.0 - out * out),),
    "leaky_relu": lambda rec, g, out, a: (g * leaky_relu_grad(a, rec.attr),),
    "scale": lambda rec, g, out, a: (rec.attr * g,),
    "sum": lambda rec, g, out, a: (np.full(a.shape, float(g)),),
    "mean": lambda rec, g, out, a: (np.full(a.shape, float(g) / a.size),),
    "square": lambda rec, g, out, a: (2.0 * a * g,),
    "sqrt": lambda rec, g, out, a: (g / (2.0 * out),),
}
