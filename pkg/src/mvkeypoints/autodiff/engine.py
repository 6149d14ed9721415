"""Reverse-mode autodiff on numpy arrays.

A :class:`Graph` is an append-only tape.  Every operation appends one
node recording the op kind, the ids of its input tensors, and whatever
forward context its backward rule needs.  Inputs always precede outputs
on the tape, so a single reverse sweep visits each node exactly once and
propagates gradients without re-traversal.

Tensors are immutable after creation (by convention; ``values`` must not
be written).  ``grad`` buffers are allocated lazily during the backward
sweep and accumulate across repeated backward calls until reset.
"""

from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np

from .. import diag
from ..errors import NumericError, ShapeMismatchError

# op kind -> fn(node, out_grads) -> list of grads aligned with node.inputs
_BACKWARD: dict[str, Callable] = {}


def register_backward(op: str):
    def deco(fn):
        _BACKWARD[op] = fn
        return fn

    return deco


class Tensor:
    """One value node of a computation graph."""

    __slots__ = ("graph", "tid", "values", "grad")

    def __init__(self, graph: "Graph", tid: int, values: np.ndarray):
        self.graph = graph
        self.tid = tid
        self.values = values
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(self.graph, other, self.dtype))

    def __radd__(self, other):
        return add(_lift(self.graph, other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(self.graph, other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(self.graph, other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(self.graph, other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(self.graph, other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(self.graph, other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(self.graph, other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)

    def __repr__(self):
        return f"Tensor(id={self.tid}, shape={self.values.shape}, dtype={self.values.dtype})"


class Node:
    """One operation record on the tape."""

    __slots__ = ("op", "inputs", "outputs", "ctx")

    def __init__(self, op: str, inputs: tuple[int, ...], outputs: tuple[int, ...], ctx: Any):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.ctx = ctx


class Graph:
    """Append-only computation tape.

    Parameters
    ----------
    dtype:
        Default dtype for leaves created through :meth:`tensor`.  The
        reference configuration is float64; float32 is the opt-in speed
        mode for the convolutional backbone.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.tensors: list[Tensor] = []
        self.nodes: list[Node] = []
        self.backward_visits = 0

    def tensor(self, values, dtype=None) -> Tensor:
        """Create a leaf tensor (no producing node)."""
        arr = np.asarray(values, dtype=dtype or self.dtype)
        t = Tensor(self, len(self.tensors), arr)
        self.tensors.append(t)
        return t

    # leaves that merely carry fixed data; same mechanics, clearer call sites
    constant = tensor

    def _out(self, values: np.ndarray) -> Tensor:
        t = Tensor(self, len(self.tensors), values)
        self.tensors.append(t)
        return t

    def _record(self, op: str, inputs: Sequence[Tensor], out_values, ctx=None):
        if isinstance(out_values, tuple):
            outs = tuple(self._out(v) for v in out_values)
            self.nodes.append(Node(op, tuple(t.tid for t in inputs), tuple(o.tid for o in outs), ctx))
            return outs
        out = self._out(out_values)
        self.nodes.append(Node(op, tuple(t.tid for t in inputs), (out.tid,), ctx))
        return out


def _lift(graph: Graph, value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return graph.tensor(np.asarray(value, dtype=dtype))


def _same_graph(*tensors: Tensor) -> Graph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise ValueError("operands belong to different graphs")
    return g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------


def _binary(op: str, a: Tensor, b: Tensor, values: np.ndarray) -> Tensor:
    g = _same_graph(a, b)
    return g._record(op, (a, b), values, ctx=(a.shape, b.shape))


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, a.values + b.values)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, a.values - b.values)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, a.values * b.values)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary("div", a, b, a.values / b.values)


@register_backward("add")
def _add_bwd(node, a, b, g):
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


@register_backward("sub")
def _sub_bwd(node, a, b, g):
    return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]


@register_backward("mul")
def _mul_bwd(node, a, b, g):
    return [_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)]


@register_backward("div")
def _div_bwd(node, a, b, g):
    return [
        _unbroadcast(g / b.values, a.shape),
        _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
    ]


def neg(a: Tensor) -> Tensor:
    return a.graph._record("neg", (a,), -a.values)


@register_backward("neg")
def _neg_bwd(node, a, g):
    return [-g]


# -- matmul ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    try:
        values = a.values @ b.values
    except ValueError as exc:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from exc
    return g._record("matmul", (a, b), values)


@register_backward("matmul")
def _matmul_bwd(node, a, b, g):
    av, bv = a.values, b.values
    if av.ndim == 1 and bv.ndim == 1:  # inner product -> scalar
        return [g * bv, g * av]
    if av.ndim == 1:  # (k,) @ (k, n) -> (n,)
        return [bv @ g, np.outer(av, g)]
    if bv.ndim == 1:  # (m, k) @ (k,) -> (m,)
        return [np.outer(g, bv), av.T @ g]
    ga = g @ np.swapaxes(bv, -1, -2)
    gb = np.swapaxes(av, -1, -2) @ g
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


# -- shape ops ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    return a.graph._record("reshape", (a,), a.values.reshape(shape), ctx=a.shape)


@register_backward("reshape")
def _reshape_bwd(node, a, g):
    return [g.reshape(node.ctx)]


def transpose(a: Tensor, axes=None) -> Tensor:
    return a.graph._record("transpose", (a,), np.transpose(a.values, axes), ctx=axes)


@register_backward("transpose")
def _transpose_bwd(node, a, g):
    axes = node.ctx
    if axes is None:
        return [np.transpose(g)]
    inv = np.argsort(axes)
    return [np.transpose(g, inv)]


def broadcast_to(a: Tensor, shape) -> Tensor:
    return a.graph._record("broadcast", (a,), np.broadcast_to(a.values, shape).copy(), ctx=a.shape)


@register_backward("broadcast")
def _broadcast_bwd(node, a, g):
    return [_unbroadcast(g, node.ctx)]


def getitem(a: Tensor, key) -> Tensor:
    out = a.values[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype)
    return a.graph._record("getitem", (a,), out.copy(), ctx=key)


@register_backward("getitem")
def _getitem_bwd(node, a, g):
    out = np.zeros_like(a.values)
    out[node.ctx] += g.reshape(out[node.ctx].shape)
    return [out]


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    g = _same_graph(*tensors)
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    return g._record("concat", tuple(tensors), values, ctx=(axis, sizes))


@register_backward("concat")
def _concat_bwd(node, *args):
    g = args[-1]
    axis, sizes = node.ctx
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(g, splits, axis=axis))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    return a.graph._record("cast", (a,), a.values.astype(dtype), ctx=a.dtype)


@register_backward("cast")
def _cast_bwd(node, a, g):
    return [g.astype(node.ctx)]


# -- reductions ----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    values = a.values.sum(axis=axis, keepdims=keepdims)
    return a.graph._record("sum", (a,), np.asarray(values), ctx=(axis, keepdims, a.shape))


@register_backward("sum")
def _sum_bwd(node, a, g):
    axis, keepdims, shape = node.ctx
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        g = np.expand_dims(g, axes)
    return [np.broadcast_to(g, shape).copy()]


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    values = a.values.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.values.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return a.graph._record("mean", (a,), np.asarray(values), ctx=(axis, keepdims, a.shape, count))


@register_backward("mean")
def _mean_bwd(node, a, g):
    axis, keepdims, shape, count = node.ctx
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        g = np.expand_dims(g, axes)
    return [np.broadcast_to(g, shape).copy() / count]


# -- scalar nonlinearities ------------------------------------------------

# Floor for the sqrt backward denominator.  sqrt has infinite slope at 0;
# the guard bounds the gradient instead of producing inf/nan.
_SQRT_GUARD = 1e-24


def sqrt(a: Tensor) -> Tensor:
    return a.graph._record("sqrt", (a,), np.sqrt(a.values))


@register_backward("sqrt")
def _sqrt_bwd(node, a, g):
    guarded = np.maximum(a.values, _SQRT_GUARD)
    if np.any(a.values < _SQRT_GUARD):
        diag.bump("sqrt_guard")
    return [g / (2.0 * np.sqrt(guarded))]


def square(a: Tensor) -> Tensor:
    return a.graph._record("square", (a,), a.values * a.values)


@register_backward("square")
def _square_bwd(node, a, g):
    return [2.0 * a.values * g]


def exp(a: Tensor) -> Tensor:
    return a.graph._record("exp", (a,), np.exp(a.values))


@register_backward("exp")
def _exp_bwd(node, a, g):
    return [g * np.exp(a.values)]


def log(a: Tensor) -> Tensor:
    return a.graph._record("log", (a,), np.log(a.values))


@register_backward("log")
def _log_bwd(node, a, g):
    return [g / a.values]


_ARCSIN_BOUND = 1.0 - 1e-7


def arcsin(a: Tensor) -> Tensor:
    """arcsin with the input clamped to |x| <= 1 - 1e-7.

    The clamp keeps the derivative finite at the domain boundary; clamp
    events bump the ``arcsin_clamp`` diagnostics counter and the gradient
    is zero outside the clamp, as for any saturated clip.
    """
    clamped = np.clip(a.values, -_ARCSIN_BOUND, _ARCSIN_BOUND)
    n_clamped = int(np.sum(np.abs(a.values) > _ARCSIN_BOUND))
    if n_clamped:
        diag.bump("arcsin_clamp", n_clamped)
    return a.graph._record("arcsin", (a,), np.arcsin(clamped))


@register_backward("arcsin")
def _arcsin_bwd(node, a, g):
    inside = np.abs(a.values) <= _ARCSIN_BOUND
    clamped = np.clip(a.values, -_ARCSIN_BOUND, _ARCSIN_BOUND)
    return [np.where(inside, g / np.sqrt(1.0 - clamped * clamped), 0.0)]


def clamp(a: Tensor, lo=None, hi=None, counter: str | None = None) -> Tensor:
    """Clip to [lo, hi]; zero gradient outside, unit gradient inside."""
    values = np.clip(a.values, lo, hi)
    if counter is not None:
        n = int(np.sum(values != a.values))
        if n:
            diag.bump(counter, n)
    return a.graph._record("clamp", (a,), values, ctx=(lo, hi))


@register_backward("clamp")
def _clamp_bwd(node, a, g):
    lo, hi = node.ctx
    mask = np.ones_like(a.values, dtype=bool)
    if lo is not None:
        mask &= a.values >= lo
    if hi is not None:
        mask &= a.values <= hi
    return [np.where(mask, g, 0.0)]


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    values = np.where(a.values >= 0, a.values, slope * a.values)
    return a.graph._record("leaky_relu", (a,), values, ctx=slope)


@register_backward("leaky_relu")
def _leaky_relu_bwd(node, a, g):
    slope = node.ctx
    return [np.where(a.values >= 0, g, slope * g)]


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


# -- backward sweep --------------------------------------------------------


def backward(loss: Tensor, seed: float = 1.0) -> None:
    """Populate ``grad`` on every tensor the loss depends on.

    The tape is swept in reverse once; each node is visited exactly once
    (``graph.backward_visits`` counts them).  Repeated calls without
    resetting grads accumulate.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    graph = loss.graph
    loss._ensure_grad()
    loss.grad += np.asarray(seed, dtype=loss.dtype).reshape(loss.shape)
    tensors = graph.tensors
    for node in reversed(graph.nodes):
        graph.backward_visits += 1
        out_grads = [tensors[tid].grad for tid in node.outputs]
        if all(og is None for og in out_grads):
            continue
        if len(node.outputs) == 1 and out_grads[0] is None:
            continue
        fn = _BACKWARD[node.op]
        ins = [tensors[tid] for tid in node.inputs]
        if len(node.outputs) == 1:
            grads = fn(node, *ins, out_grads[0])
        else:
            grads = fn(node, *ins, out_grads)
        for t, grad in zip(ins, grads):
            if grad is None:
                continue
            t._ensure_grad()
            t.grad += grad
        # free intermediate grads eagerly? kept: spec wants inputs populated,
        # and graphs are per-step so memory is bounded by one step anyway.


def zero_grads(graph: Graph) -> None:
    for t in graph.tensors:
        t.grad = None
