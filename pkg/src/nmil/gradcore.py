"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the operations needed by the nested MIL network are provided. A
:class:`Graph` is a tape: while one is active (``with Graph() as g:``), every
operation whose operands require gradients appends a node to it. Operations
executed with no active graph are plain numpy computations and record
nothing, which is what inference uses.

The active graph is thread-local, so distinct graphs can be built on distinct
threads at the same time.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .exceptions import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    StateError,
)

BCE_EPS = 1e-7

_local = threading.local()


class Tensor:
    """Dense float64 array plus an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.array(values, dtype=np.float64)
        if self.values.ndim == 0:
            self.values = self.values.reshape(1)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all route through the module functions below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Graph:
    """Tape of executed operations, in execution (hence topological) order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @staticmethod
    def active() -> Optional["Graph"]:
        stack = getattr(_local, "stack", None)
        return stack[-1] if stack else None

    def record(self, out, parents, backward):
        self.nodes.append(_Node(out, parents, backward))


def _result(values, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    graph = Graph.active()
    out.requires_grad = graph is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        graph.record(out, tuple(parents), backward)
    return out


def _same_shape(opname, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        # the input-side product is the expensive one for raw instances; skip it
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _result(av @ bv, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result(a.values.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        values = a.values.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(values, (a,), lambda g: (g.reshape(old),))


# ------------------------------------------------------------------ elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.values - b.values, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    av, bv = a.values, b.values
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.values * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.values)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    return _result(y, (a,), lambda g: (g * y,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _result(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n bias vector to every row of an m x n matrix."""
    if a.values.ndim != 2 or bias.values.ndim != 1 or bias.shape[0] != a.shape[1]:
        raise DimensionError(f"add_bias: cannot add {bias.shape} to rows of {a.shape}")
    return _result(a.values + bias.values, (a, bias), lambda g: (g, g.sum(axis=0)))


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of an n x m matrix by w[i]."""
    if a.values.ndim != 2 or w.values.ndim != 1 or w.shape[0] != a.shape[0]:
        raise DimensionError(f"scale_rows: {w.shape} weights for rows of {a.shape}")
    av, wv = a.values, w.values

    def backward(g):
        return g * wv[:, None], np.einsum("ij,ij->i", g, av)

    return _result(av * wv[:, None], (a, w), backward)


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "exp": exp, "relu": relu}
_BINARY = {"add": add, "sub": sub, "hadamard": hadamard}


def ew(op: str, *operands):
    """Dispatch an elementwise op by name.

    ``ew("scale", t, c)`` takes a tensor and a python scalar; the binary ops
    take two tensors of identical shape.
    """
    if op in _UNARY:
        (a,) = operands
        return _UNARY[op](a)
    if op in _BINARY:
        a, b = operands
        return _BINARY[op](a, b)
    if op == "scale":
        a, c = operands
        return scale(a, c)
    raise ContractError(f"unknown elementwise op {op!r}")


# ------------------------------------------------------------------- reductions


def reduce(op: str, t: Tensor, axis: int = 0) -> Tensor:
    """Sum, mean or max along one axis (the axis is removed)."""
    x = t.values
    if not 0 <= axis < x.ndim:
        raise DimensionError(f"reduce: axis {axis} out of range for shape {t.shape}")
    n = x.shape[axis]
    if n == 0:
        raise DegenerateInputError(f"reduce: axis {axis} of shape {t.shape} is empty")
    shape = x.shape
    kept = shape[:axis] + (1,) + shape[axis + 1 :]

    if op == "sum":
        out = x.sum(axis=axis)
        backward = lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),)
    elif op == "mean":
        out = x.mean(axis=axis)
        backward = lambda g: (np.broadcast_to(g.reshape(kept) / n, shape).copy(),)
    elif op == "max":
        # np.argmax returns the first maximum: lowest index wins ties
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        out = np.take_along_axis(x, idx, axis=axis).squeeze(axis)

        def backward(g):
            gx = np.zeros(shape)
            np.put_along_axis(gx, idx, g.reshape(kept), axis=axis)
            return (gx,)
    else:
        raise ContractError(f"unknown reduction {op!r}")
    if out.ndim == 0:
        out = out.reshape(1)
    return _result(np.asarray(out, dtype=np.float64), (t,), backward)


def _offsets(sizes, total):
    sizes = np.asarray(sizes, dtype=np.intp)
    if sizes.ndim != 1 or sizes.size == 0:
        raise DegenerateInputError("segment op needs at least one segment")
    if np.any(sizes < 1):
        raise DegenerateInputError(f"empty segment in sizes {sizes.tolist()}")
    if sizes.sum() != total:
        raise DimensionError(f"segment sizes sum to {sizes.sum()}, expected {total}")
    starts = np.zeros(sizes.size, dtype=np.intp)
    np.cumsum(sizes[:-1], out=starts[1:])
    return sizes, starts


def segment_softmax(v: Tensor, sizes) -> Tensor:
    """Softmax applied independently to consecutive runs of a vector."""
    x = v.values
    if x.ndim != 1:
        raise DimensionError(f"segment_softmax: expected a vector, got shape {v.shape}")
    if x.size == 0:
        raise DegenerateInputError("softmax of an empty vector")
    sizes, starts = _offsets(sizes, x.size)
    m = np.repeat(np.maximum.reduceat(x, starts), sizes)
    e = np.exp(x - m)
    # fsum is correctly rounded, so the normaliser ignores member order
    denom = np.array([math.fsum(e[s : s + n]) for s, n in zip(starts, sizes)])
    y = e / np.repeat(denom, sizes)

    def backward(g):
        dot = np.repeat(np.add.reduceat(g * y, starts), sizes)
        return (y * (g - dot),)

    return _result(y, (v,), backward)


def softmax(v: Tensor) -> Tensor:
    """Numerically stable softmax of a 1-D tensor."""
    if v.values.ndim != 1:
        raise DimensionError(f"softmax: expected a vector, got shape {v.shape}")
    if v.values.size == 0:
        raise DegenerateInputError("softmax of an empty vector")
    return segment_softmax(v, [v.values.size])


def segment_reduce(op: str, x: Tensor, sizes) -> Tensor:
    """Reduce consecutive row blocks of an n x m matrix to a k x m matrix."""
    a = x.values
    if a.ndim != 2:
        raise DimensionError(f"segment_reduce: expected a matrix, got shape {x.shape}")
    sizes, starts = _offsets(sizes, a.shape[0])

    if op == "sum":
        out = np.add.reduceat(a, starts, axis=0)
        backward = lambda g: (np.repeat(g, sizes, axis=0),)
    elif op == "mean":
        out = np.add.reduceat(a, starts, axis=0) / sizes[:, None]
        backward = lambda g: (np.repeat(g / sizes[:, None], sizes, axis=0),)
    elif op == "max":
        rows = np.empty((sizes.size, a.shape[1]), dtype=np.intp)
        for k, (s, n) in enumerate(zip(starts, sizes)):
            rows[k] = s + np.argmax(a[s : s + n], axis=0)
        cols = np.arange(a.shape[1])
        out = a[rows, cols]

        def backward(g):
            gx = np.zeros_like(a)
            # distinct segments never share a row, so plain assignment is safe
            gx[rows, cols] = g
            return (gx,)
    else:
        raise ContractError(f"unknown reduction {op!r}")
    return _result(out, (x,), backward)


# ------------------------------------------------------------------------ loss


def bce_loss(p: Tensor, y) -> Tensor:
    """Binary cross-entropy of a single probability against a 0/1 label."""
    if p.values.size != 1:
        raise ContractError(f"bce_loss expects one probability, got shape {p.shape}")
    y = float(y)
    if y not in (0.0, 1.0):
        raise ContractError(f"bce_loss label must be 0 or 1, got {y}")
    raw = p.values.reshape(-1)[0]
    q = min(max(raw, BCE_EPS), 1.0 - BCE_EPS)
    loss = -(y * np.log(q) + (1.0 - y) * np.log(1.0 - q))
    shape = p.shape
    inside = BCE_EPS <= raw <= 1.0 - BCE_EPS

    def backward(g):
        d = (-y / q + (1.0 - y) / (1.0 - q)) if inside else 0.0
        return (np.full(shape, g.reshape(-1)[0] * d),)

    return _result(np.array([loss]), (p,), backward)


# ---------------------------------------------------------------------- driver


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """Populate ``.grad`` on every gradient-requiring ancestor of ``loss``.

    Leaf gradients accumulate into existing buffers; call
    :meth:`Tensor.zero_grad` (or :func:`sgd_step`) between passes.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.active()
    if graph is None:
        raise StateError("backward called without a graph")
    if graph.consumed:
        raise StateError("backward already ran on this graph")
    graph.consumed = True
    if not loss.requires_grad:
        return

    produced = {id(node.out) for node in graph.nodes}
    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for parent, pg in zip(node.parents, node.backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in produced:
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
            elif parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64)
            else:
                parent.grad += pg


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """Plain SGD update ``p -= lr * grad``; gradients are reset to zero."""
    if lr < 0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {p.name or p!r} has no gradient")
    for p in params:
        if lr:
            p.grad *= lr
            p.values -= p.grad
        p.grad.fill(0.0)
