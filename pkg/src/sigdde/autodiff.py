"""Tape-based reverse-mode differentiation over dense float64 arrays.

Tensors are immutable wrappers around numpy arrays. Operations on tensors
that belong to a :class:`Tape` are appended to it together with a
vector-Jacobian closure; :func:`backward` then walks the tape once in reverse
id order.

Shapes are never broadcast implicitly. ``add``, ``sub`` and ``mul`` require
identical shapes, scalars enter only through :func:`scale`, and row-wise bias
terms are handled by the layer code via an explicit ones column.

Example
-------
>>> tape = Tape()
>>> x = tape.variable([1.0, 2.0, 3.0])
>>> loss = tsum(square(x))
>>> grads = backward(tape, loss)
>>> grads[x.node].tolist()
[2.0, 4.0, 6.0]
"""

from __future__ import annotations

import threading
from collections.abc import Mapping
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

EXP_CLAMP = 40.0

OP_KINDS = (
    "matmul", "add", "sub", "mul", "scale", "tanh", "sigmoid", "exp",
    "concat", "slice", "reshape", "sum", "mean", "square", "outer",
)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    kind: str
    parents: tuple  # node ids, or None for constant inputs
    vjp: Callable | None
    shape: tuple


class Tape:
    """Append-only record of operations.

    Every node only references strictly smaller ids, so the list order is a
    topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value, name=None) -> "Tensor":
        data = np.array(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), None, data.shape))
        return Tensor(data, tape=self, node=len(self.nodes) - 1)

    def _append(self, kind, parents, vjp, shape):
        self.nodes.append(Node(kind, parents, vjp, shape))
        return len(self.nodes) - 1


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(kind, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError(f"{kind}: inputs recorded on different tapes")
    if tape is None:
        return Tensor(out)
    parents = tuple(t.node if t.tape is not None else None for t in inputs)
    node = tape._append(kind, parents, vjp, out.shape)
    return Tensor(out, tape=tape, node=node)


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _result("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _result("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result("scale", (a,), a.data * c, lambda g: (g * c,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form: no overflow for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    """Exponential with the input clamped at ``EXP_CLAMP`` (zero slope above)."""
    a = as_tensor(a)
    live = a.data < EXP_CLAMP
    y = np.exp(np.minimum(a.data, EXP_CLAMP))
    return _result("exp", (a,), y, lambda g: (g * y * live,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result("square", (a,), x * x, lambda g: (2.0 * g * x,))


# -- linear algebra ------------------------------------------------------------

_MODE = threading.local()


@contextmanager
def row_exact():
    """Make every ``matmul`` row depend only on that row's inputs.

    BLAS picks kernels (and summation orders) from the matrix shapes, so a
    row's result can change in the last bit with the batch it sits in. Inside
    this context the contraction runs through a fixed-order loop instead;
    slower, but batch composition no longer matters.
    """
    prev = getattr(_MODE, "exact", False)
    _MODE.exact = True
    try:
        yield
    finally:
        _MODE.exact = prev


def matmul(a, b) -> Tensor:
    """Contract the last axis of ``a`` (any rank >= 1) with a 2-D ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    k, n = bd.shape

    def vjp(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    if getattr(_MODE, "exact", False):
        out = np.einsum("...k,kn->...n", ad, bd, optimize=False)
    else:
        out = ad @ bd
    return _result("matmul", (a, b), out, vjp)


def outer(a, b) -> Tensor:
    """Outer product over the last axis; leading (batch) axes must agree.

    ``(..., p) x (..., q) -> (..., p, q)``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"outer: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = ad[..., :, None] * bd[..., None, :]

    def vjp(g):
        ga = np.matmul(g, bd[..., :, None])[..., 0]
        gb = np.matmul(ad[..., None, :], g)[..., 0, :]
        return ga, gb

    return _result("outer", (a, b), out, vjp)


# -- structural ----------------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in ts], axis=ax)

    def vjp(g):
        idx = [slice(None)] * ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _result("concat", ts, out, vjp)


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) indexing: ints and slices only."""
    a = as_tensor(a)
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (isinstance(k, (int, np.integer, slice)) or k is Ellipsis):
            raise ShapeError(f"slice: unsupported index {k!r} for shape {a.shape}")
    out = a.data[key]
    return _result("slice", (a,), out, lambda g: (_SliceGrad(key, g),))


class _SliceGrad:
    """Gradient of a slice, scattered into the parent accumulator in place."""

    __slots__ = ("key", "g")

    def __init__(self, key, g):
        self.key = key
        self.g = g



def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    old = a.shape
    return _result("reshape", (a,), out, lambda g: (g.reshape(old),))


def _restore(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis)
    return _result("sum", (a,), np.asarray(out), lambda g: (_restore(g, shape, axis),))


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.mean(a.data, axis=axis)
    count = a.data.size // max(np.asarray(out).size, 1)
    return _result("mean", (a,), np.asarray(out), lambda g: (_restore(g, shape, axis) / count,))


_DISPATCH = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "scale": scale,
    "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "concat": None,
    "slice": slice_, "reshape": reshape, "sum": tsum, "mean": mean,
    "square": square, "outer": outer,
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply an op by name. Extra arguments (axis, shape, key, factor) go in kwargs."""
    if kind not in _DISPATCH:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {OP_KINDS}")
    if kind == "concat":
        return concat(inputs, **kwargs)
    if kind == "scale":
        return scale(inputs[0], kwargs["factor"])
    return _DISPATCH[kind](*inputs, **kwargs)


# -- reverse pass --------------------------------------------------------------

def backward(tape: Tape, root: Tensor) -> "Gradients":
    """Gradients of a scalar ``root`` for every node on ``tape``.

    Nodes that ``root`` does not depend on get an explicit zero array.
    """
    if root.tape is not tape:
        raise ValueError("root was not recorded on this tape")
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    nodes = tape.nodes
    grads: list = [None] * len(nodes)
    owned = [False] * len(nodes)
    grads[root.node] = np.ones(root.shape)
    for i in range(root.node, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid is None:
                continue
            acc = grads[pid]
            if isinstance(pg, _SliceGrad):
                if acc is None:
                    acc = grads[pid] = np.zeros(nodes[pid].shape)
                    owned[pid] = True
                elif not owned[pid]:
                    acc = grads[pid] = np.array(acc)
                    owned[pid] = True
                acc[pg.key] += pg.g
            elif acc is None:
                # shared with the child until a second contribution arrives
                grads[pid] = pg
            elif owned[pid]:
                acc += pg
            else:
                grads[pid] = acc + pg
                owned[pid] = True
    return Gradients(grads, [n.shape for n in nodes])


class Gradients(Mapping):
    """Read-only node id -> gradient map; arrays are materialized on lookup."""

    def __init__(self, grads, shapes):
        self._grads = grads
        self._shapes = shapes

    def __getitem__(self, node_id: int) -> np.ndarray:
        g = self._grads[node_id]
        if g is None:
            return np.zeros(self._shapes[node_id])
        return np.array(np.broadcast_to(g, self._shapes[node_id]))

    def __iter__(self):
        return iter(range(len(self._grads)))

    def __len__(self):
        return len(self._grads)

    def of(self, t: Tensor) -> np.ndarray:
        return self[t.node]


def grad(f: Callable[[Tensor], Tensor], point) -> np.ndarray:
    """Gradient of scalar ``f`` at ``point`` via a fresh tape."""
    tape = Tape()
    x = tape.variable(point)
    out = f(x)
    if out.tape is not tape:
        return np.zeros(x.shape)
    return backward(tape, out)[x.node]


def relative_error(analytic, numeric, metric: str = "elementwise") -> float:
    """Disagreement between two gradients.

    ``elementwise``: max over entries of ``|a - n| / (|a| + |n|)``.
    ``norm``: ``||a - n|| / (||a|| + ||n||)``, which stays meaningful when some
    entries sit below the finite-difference noise floor.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    if metric == "norm":
        return float(np.linalg.norm(a - n) / (np.linalg.norm(a) + np.linalg.norm(n) + 1e-12))
    if metric != "elementwise":
        raise ValueError(f"unknown metric {metric!r}")
    return float((np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12)).max())


def gradient_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-6,
                   metric: str = "elementwise") -> float:
    """Relative disagreement between the tape gradient and central differences."""
    x0 = np.array(point, dtype=np.float64)
    analytic = grad(f, x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(f(Tensor(xp.reshape(x0.shape))).data)
        fm = float(f(Tensor(xm.reshape(x0.shape))).data)
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return relative_error(analytic, numeric, metric)
