"""Define-by-run reverse-mode automatic differentiation over dense float64 arrays.

Every operation on a :class:`Tensor` that has at least one input requiring a
gradient appends a node to an implicit graph. Node ids increase with creation
time, so sorting reachable nodes by id is a valid topological order; the
backward pass walks that order once and writes each leaf's gradient exactly
once, accumulating across fan-out.

Binary operations follow numpy broadcasting. Gradients of broadcast operands
are summed back to the operand's shape.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "DomainError", "no_grad", "is_grad_enabled",
    "tensor", "constant", "add", "sub", "mul", "div", "neg", "matmul", "affine",
    "tanh", "softplus", "sigmoid", "exp", "log", "square", "sqrt", "relu",
    "sum", "mean", "concat", "columns", "take", "reshape",
    "backward", "gradients", "graph_records", "grad_check",
]

_ids = itertools.count()
_mode = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


class no_grad:
    """Context manager that stops graph recording (forward values only)."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _mode.enabled = False
        return self

    def __exit__(self, *exc):
        _mode.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_id")
    # make ndarray <op> Tensor dispatch to the Tensor reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, idx):
        # integer or slice indexing along the leading axis
        return take(self, idx, axis=0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _node(value: np.ndarray, parents: Sequence[Tensor], op: str, fn: Callable) -> Tensor:
    out = Tensor(value)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out._op = op
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.data, b.data
    return _node(av * bv, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                            _unbroadcast(g * av, bv.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "div")
    av, bv = a.data, b.data
    out = av / bv
    return _node(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / bv, av.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = constant(a)
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def tanh(a) -> Tensor:
    a = constant(a)
    out = np.tanh(a.data)
    return _node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = constant(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = constant(a)
    x = a.data
    return _node(np.logaddexp(0.0, x), (a,), "softplus", lambda g: (g * _sigmoid(x),))


def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = constant(a)
    x = a.data
    if np.any(~(x > 0)):
        raise DomainError(f"log: non-positive input (min {np.nanmin(x) if x.size else 'n/a'})")
    return _node(np.log(x), (a,), "log", lambda g: (g / x,))


def square(a) -> Tensor:
    a = constant(a)
    x = a.data
    return _node(x * x, (a,), "square", lambda g: (2.0 * g * x,))


def sqrt(a) -> Tensor:
    a = constant(a)
    x = a.data
    if np.any(~(x > 0)):
        raise DomainError(f"sqrt: non-positive input (min {np.nanmin(x) if x.size else 'n/a'})")
    out = np.sqrt(x)
    return _node(out, (a,), "sqrt", lambda g: (0.5 * g / out,))


def relu(a) -> Tensor:
    """Positive part max(x, 0); the subgradient at 0 is taken as 0."""
    a = constant(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


# ------------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def fn(g):
        if bv.ndim == 1:
            return (np.outer(g, bv) if a.requires_grad else None,
                    av.T @ g if b.requires_grad else None)
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _node(av @ bv, (a, b), "matmul", fn)


def affine(x, w, b) -> Tensor:
    """x @ w + b for x (M, n), w (n, k), b (k,)."""
    x, w, b = constant(x), constant(w), constant(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {x.shape} and {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match weight shape {w.shape}")
    xv, wv = x.data, w.data

    def fn(g):
        return (g @ wv.T if x.requires_grad else None,
                xv.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _node(xv @ wv + b.data, (x, w, b), "affine", fn)


# --------------------------------------------------------------------- reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = constant(a)
    shape = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), "sum", fn)


def mean(a, axis: int | None = None) -> Tensor:
    a = constant(a)
    shape = a.shape
    n = a.size if axis is None else shape[axis]

    def fn(g):
        if axis is None:
            return (np.full(shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _node(np.asarray(a.data.mean(axis=axis)), (a,), "mean", fn)


# ------------------------------------------------------------------ structure ops


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [constant(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, xs, "concat", fn)


def columns(xs: Sequence) -> Tensor:
    """Stack 1-D tensors of equal length into the columns of an (M, k) matrix."""
    xs = [constant(x) for x in xs]
    m = xs[0].shape
    for x in xs:
        if x.ndim != 1 or x.shape != m:
            raise ShapeError(f"columns: expected equal 1-D shapes, got {[x.shape for x in xs]}")
    out = np.stack([x.data for x in xs], axis=1)
    return _node(out, xs, "columns", lambda g: tuple(g[:, j] for j in range(g.shape[1])))


def take(a, idx, axis: int = 0) -> Tensor:
    """Gather along an axis by integer index, slice or index array."""
    a = constant(a)
    shape = a.shape
    sl = (slice(None),) * axis + (idx,)
    out = np.array(a.data[sl], dtype=np.float64)

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, sl, g)
        return (full,)

    return _node(out, (a,), "take", fn)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from None
    return _node(out, (a,), "reshape", lambda g: (g.reshape(old),))


# ----------------------------------------------------------------------- backward


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda n: n._id, reverse=True)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    for node in _reachable(root):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in pending:
                pending[parent._id] = pending[parent._id] + pg
            else:
                pending[parent._id] = pg


def gradients(root: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar root w.r.t. ``leaves``; zeros for unreachable leaves.

    Existing ``.grad`` slots are cleared first and left holding the result.
    """
    leaves = list(leaves)
    for leaf in leaves:
        leaf.grad = None
    backward(root)
    return [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad for leaf in leaves]


def graph_records(root: Tensor) -> list[tuple[str, tuple[int, ...]]]:
    """Topologically ordered (op, parent positions) records of the graph under root."""
    nodes = list(reversed(_reachable(root)))
    pos = {n._id: i for i, n in enumerate(nodes)}
    return [(n._op, tuple(pos[p._id] for p in n._parents if p._id in pos)) for n in nodes]


# --------------------------------------------------------------------- grad check


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Norm-wise relative error ||g_backward - g_fd|| / max(||g_backward||, ||g_fd||).

    Coordinate-wise ratios are avoided: they blow up wherever a gradient
    component is zero up to round-off.

    ``f`` maps a Tensor shaped like ``point`` to a scalar Tensor.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"grad_check: step h={h} outside [1e-7, 1e-4]")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = f(x)
    if not np.isfinite(out.data).all():
        raise DomainError("grad_check: non-finite value at the base point")
    (analytic,) = gradients(out, [x])
    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise DomainError(f"grad_check: non-finite value while probing coordinate {i}")
            flat[i] = (fp - fm) / (2.0 * h)
    if not np.isfinite(analytic).all():
        raise DomainError("grad_check: non-finite analytic gradient")
    if x0.size == 0:
        return 0.0
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)
