"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` owns an append-only list of :class:`Node` objects. Every
operation appends one node whose parents were created earlier, so creation
order is already a topological order and :meth:`Tape.backward` only has to
walk the list in reverse.

    tape = Tape()
    x = tape.leaf([3.0], requires_grad=True)
    y = square(x)
    grads = tape.backward(y)
    grads[x.id]  # array([6.])
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Node:
    """One value in a computation graph. Treat as immutable."""

    __slots__ = ("id", "tape", "data", "op", "parents", "requires_grad", "_vjp")

    def __init__(self, tape, data, op, parents, requires_grad, vjp):
        self.id = len(tape.nodes)
        self.tape = tape
        self.data = data
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._vjp = vjp

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only node store plus the gradient map of the last backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def leaf(self, data, shape: Optional[Sequence[int]] = None, requires_grad: bool = False) -> Node:
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s < 0 for s in shape):
                raise ShapeError(f"negative extent in shape {shape}")
            if arr.size != math.prod(shape):
                raise ShapeError(f"buffer of length {arr.size} does not fit shape {shape}")
            arr = arr.reshape(shape)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        return self._append(arr, "leaf", (), requires_grad, None)

    def constant(self, data) -> Node:
        return self.leaf(data, requires_grad=False)

    def _append(self, data, op, parents, requires_grad, vjp) -> Node:
        node = Node(self, data, op, parents, requires_grad, vjp)
        self.nodes.append(node)
        return node

    def backward(self, root: Node) -> dict[int, np.ndarray]:
        """Accumulate d(root)/d(node) for every node on the tape that requires it.

        Returns a fresh map from node id to gradient array. Nodes that do not
        require gradients, or that root does not depend on, are absent.
        """
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {}
        if root.requires_grad:
            grads[root.id] = np.ones_like(root.data)
        for node in reversed(self.nodes[: root.id + 1]):
            g = grads.get(node.id)
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None or not self.nodes[pid].requires_grad:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        self.grads = grads
        return grads


def _record(data, op, inputs, vjp) -> Node:
    tape = inputs[0].tape
    for other in inputs[1:]:
        if other.tape is not tape:
            raise ValueError(f"{op}: operands live on different tapes")
    requires_grad = any(n.requires_grad for n in inputs)
    return tape._append(data, op, tuple(n.id for n in inputs), requires_grad,
                        vjp if requires_grad else None)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return _record(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def negate(a: Node) -> Node:
    return _record(-a.data, "negate", (a,), lambda g: (-g,))


def abs_(a: Node) -> Node:
    sign = np.sign(a.data)
    return _record(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def square(a: Node) -> Node:
    ad = a.data
    return _record(ad * ad, "square", (a,), lambda g: (2.0 * ad * g,))


def log(a: Node, floor: Optional[float] = None) -> Node:
    """Natural log. With ``floor`` set, inputs below it are clamped and get zero gradient."""
    ad = a.data
    if floor is None:
        if np.any(ad <= 0):
            raise DomainError("log of non-positive input")
        return _record(np.log(ad), "log", (a,), lambda g: (g / ad,))
    clamped = np.maximum(ad, floor)
    live = ad > floor
    return _record(np.log(clamped), "log", (a,), lambda g: (np.where(live, g / clamped, 0.0),))


def relu(a: Node) -> Node:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Node) -> Node:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def scale(a: Node, factor: float) -> Node:
    """Multiply by a plain float (not a graph node)."""
    factor = float(factor)
    return _record(a.data * factor, "scale", (a,), lambda g: (g * factor,))


def rsub(value: float, a: Node) -> Node:
    """``value - a`` for a plain float ``value``."""
    return _record(float(value) - a.data, "rsub", (a,), lambda g: (-g,))


_UNARY = {
    "abs": abs_,
    "square": square,
    "log": log,
    "negate": negate,
    "relu": relu,
    "sigmoid": sigmoid,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_tag: str, a: Node, b: Optional[Node] = None) -> Node:
    if op_tag in _BINARY:
        if b is None:
            raise ValueError(f"{op_tag} needs two operands")
        return _BINARY[op_tag](a, b)
    if op_tag in _UNARY:
        if b is not None:
            raise ValueError(f"{op_tag} takes one operand")
        return _UNARY[op_tag](a)
    raise ValueError(f"unknown elementwise op {op_tag!r}")


def matmul(a: Node, b: Node) -> Node:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents {a.shape[1]} and {b.shape[0]} differ")
    ad, bd = a.data, b.data
    return _record(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(a: Node, bias: Node) -> Node:
    """Add a length-k vector to every row of an [n x k] matrix."""
    if a.data.ndim != 2 or bias.data.ndim != 1 or a.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: cannot add {bias.shape} to rows of {a.shape}")
    return _record(a.data + bias.data, "add_bias", (a, bias), lambda g: (g, g.sum(axis=0)))


def softmax(a: Node) -> Node:
    """Row-wise softmax of an [n x c] matrix."""
    if a.data.ndim != 2 or a.shape[1] < 1:
        raise ShapeError(f"softmax needs [n x c] with c >= 1, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record(s, "softmax", (a,), vjp)


def reduce(op_tag: str, a: Node, axis: Optional[int] = None) -> Node:
    if op_tag not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op_tag!r}")
    shape = a.shape
    if axis is None:
        count = a.data.size
        out = a.data.sum().reshape(1)
    else:
        if not -len(shape) <= axis < len(shape):
            raise ShapeError(f"axis {axis} out of range for shape {shape}")
        axis = axis % len(shape)
        count = shape[axis]
        out = a.data.sum(axis=axis)
        if out.ndim == 0:
            out = out.reshape(1)
    if op_tag == "mean":
        if count == 0:
            raise ShapeError("mean over an empty extent")
        out = out / count
    factor = 1.0 / count if op_tag == "mean" else 1.0

    def vjp(g):
        if axis is None:
            return (np.full(shape, g.reshape(-1)[0] * factor),)
        gg = g.reshape(shape[:axis] + (1,) + shape[axis + 1:])
        return (np.broadcast_to(gg * factor, shape).copy(),)

    return _record(out, op_tag, (a,), vjp)


def sum_(a: Node, axis: Optional[int] = None) -> Node:
    return reduce("sum", a, axis)


def mean(a: Node, axis: Optional[int] = None) -> Node:
    return reduce("mean", a, axis)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    if not nodes:
        raise ValueError("concat of zero nodes")
    if len(nodes) == 1:
        return nodes[0]
    ref = nodes[0].shape
    rank = len(ref)
    if not -rank <= axis < rank:
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    axis = axis % rank
    for n in nodes[1:]:
        s = n.shape
        if len(s) != rank or s[:axis] != ref[:axis] or s[axis + 1:] != ref[axis + 1:]:
            raise ShapeError(f"concat: shape {s} incompatible with {ref} along axis {axis}")
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    out = np.concatenate([n.data for n in nodes], axis=axis)
    return _record(out, "concat", tuple(nodes), lambda g: tuple(np.split(g, bounds, axis=axis)))


def pool_bins(length: int, target: int) -> list[tuple[int, int]]:
    """Bin ``i`` covers ``[floor(i*L/O), ceil((i+1)*L/O))``; bins may overlap."""
    return [((i * length) // target, -((-(i + 1) * length) // target)) for i in range(target)]


def adaptive_pool(a: Node, target: int, mode: str = "avg") -> Node:
    """Pool every row of an [n x L] matrix to ``target`` columns."""
    if mode not in ("avg", "max"):
        raise ValueError(f"unknown pool mode {mode!r}")
    if target < 1:
        raise ShapeError("adaptive_pool target length must be >= 1")
    if a.data.ndim != 2 or a.shape[1] < 1:
        raise ShapeError(f"adaptive_pool needs [n x L] with L >= 1, got {a.shape}")
    n, length = a.shape
    if target == length:
        return _record(a.data.copy(), f"adaptive_pool_{mode}", (a,), lambda g: (g,))
    x = a.data
    bins = pool_bins(length, target)
    out = np.empty((n, target))
    if mode == "avg":
        for i, (lo, hi) in enumerate(bins):
            out[:, i] = x[:, lo:hi].mean(axis=1)

        def vjp(g):
            gx = np.zeros_like(x)
            for i, (lo, hi) in enumerate(bins):
                gx[:, lo:hi] += (g[:, i] / (hi - lo))[:, None]
            return (gx,)
    else:
        rows = np.arange(n)
        argmax = np.empty((n, target), dtype=np.intp)
        for i, (lo, hi) in enumerate(bins):
            # np.argmax returns the first maximum, so ties go to the lowest index
            argmax[:, i] = lo + np.argmax(x[:, lo:hi], axis=1)
            out[:, i] = x[rows, argmax[:, i]]

        def vjp(g):
            gx = np.zeros_like(x)
            for i in range(target):
                np.add.at(gx, (rows, argmax[:, i]), g[:, i])
            return (gx,)

    return _record(out, f"adaptive_pool_{mode}", (a,), vjp)


def backward(tape: Tape, root: Node) -> dict[int, np.ndarray]:
    return tape.backward(root)


def nudge_from_kinks(point, margin: float = 1e-3) -> np.ndarray:
    """Move coordinates within ``margin`` of zero out to ``+/-margin``.

    Also separates exact ties by adding ``margin * k`` to the k-th repeat of
    a value, so max-pool bins have a unique winner.
    """
    x = np.array(point, dtype=np.float64).reshape(-1)
    near = np.abs(x) < margin
    x[near] = np.where(x[near] >= 0, margin, -margin)
    seen: dict[float, int] = {}
    for i, v in enumerate(x):
        k = seen.get(v, 0)
        seen[v] = k + 1
        if k:
            x[i] = v + margin * k
    return x.reshape(np.shape(point))


def grad_check(builder: Callable[[Tape, Node], Node], point, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    ``builder(tape, x)`` must return a scalar node computed from the leaf ``x``.
    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    point = np.array(point, dtype=np.float64)

    def value(p):
        tape = Tape()
        return builder(tape, tape.leaf(p)).item()

    tape = Tape()
    x = tape.leaf(point.copy(), requires_grad=True)
    root = builder(tape, x)
    analytic = tape.backward(root).get(x.id, np.zeros_like(point)).reshape(-1)

    flat = point.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += eps
        lo[i] -= eps
        numeric[i] = (value(hi.reshape(point.shape)) - value(lo.reshape(point.shape))) / (2 * eps)
    if flat.size == 0:
        return 0.0
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
