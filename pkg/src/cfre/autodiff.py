"""Reverse-mode automatic differentiation over dense float64 arrays.

The backward pass emits graph nodes instead of raw arrays, so a gradient
is itself a differentiable quantity.  That is what lets trace-of-Jacobian
terms (built from an inner gradient) be differentiated again with respect
to network weights inside a training loss.

Elementwise broadcasting is deliberately restricted to scalar-with-array
and equal shapes; anything richer must go through the explicit shape ops
(expand_rows, concat_rows/_cols, take_rows/_cols, reshape).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DomainError, InputError, NumericError


class UnreachableGradientWarning(UserWarning):
    """grad() was asked about a node the output does not depend on."""


def _freeze(arr):
    arr.flags.writeable = False
    return arr


def _check_shape(arr):
    if arr.size == 0:
        raise InputError("arrays must have strictly positive dimension sizes, got shape %s"
                         % (arr.shape,))


class DiffNode:
    """One value in the computation graph.

    value is a read-only float64 ndarray.  parents holds (node, vjp)
    pairs, where vjp maps the upstream gradient node to this parent's
    contribution, expressed in graph ops so gradients stay differentiable.
    """

    __slots__ = ("value", "parents", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = value
        self.parents = parents
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def __repr__(self):
        return "DiffNode(shape=%s, requires_grad=%s)" % (self.value.shape, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x):
    """Leaf node that never receives a gradient."""
    arr = np.array(x, dtype=np.float64)
    _check_shape(arr)
    return DiffNode(_freeze(arr))


def parameter(x):
    """Leaf node that participates in differentiation."""
    arr = np.array(x, dtype=np.float64)
    _check_shape(arr)
    return DiffNode(_freeze(arr), requires_grad=True)


def as_node(x):
    """Lift numbers and arrays to constant nodes; pass nodes through."""
    if isinstance(x, DiffNode):
        return x
    return constant(x)


def _result(value, links):
    # links: iterable of (parent_node, vjp).  Drop vjps into constants.
    parents = tuple((p, fn) for p, fn in links if p.requires_grad)
    return DiffNode(_freeze(np.asarray(value)), parents, bool(parents))


# ---------------------------------------------------------------------------
# elementwise operations


def _promote_pair(a, b, op_name):
    a = as_node(a)
    b = as_node(b)
    if a.value.shape != b.value.shape and a.value.size != 1 and b.value.size != 1:
        raise InputError("%s: shapes %s and %s are neither equal nor scalar-with-array"
                         % (op_name, a.value.shape, b.value.shape))
    return a, b


def _unbroadcast(g, shape):
    # Collapse a gradient back to a scalar operand's shape.
    if g.value.shape == shape:
        return g
    return reshape(reduce_sum(g), shape)


def add(a, b):
    a, b = _promote_pair(a, b, "add")
    sa, sb = a.value.shape, b.value.shape
    return _result(a.value + b.value,
                   ((a, lambda g: _unbroadcast(g, sa)),
                    (b, lambda g: _unbroadcast(g, sb))))


def sub(a, b):
    a, b = _promote_pair(a, b, "sub")
    sa, sb = a.value.shape, b.value.shape
    return _result(a.value - b.value,
                   ((a, lambda g: _unbroadcast(g, sa)),
                    (b, lambda g: _unbroadcast(neg(g), sb))))


def mul(a, b):
    a, b = _promote_pair(a, b, "mul")
    sa, sb = a.value.shape, b.value.shape
    return _result(a.value * b.value,
                   ((a, lambda g: _unbroadcast(mul(g, b), sa)),
                    (b, lambda g: _unbroadcast(mul(g, a), sb))))


def div(a, b):
    a, b = _promote_pair(a, b, "div")
    zeros = np.flatnonzero(b.value == 0.0)
    if zeros.size:
        raise DomainError("div: divisor is zero at flat index %d" % zeros[0],
                          index=int(zeros[0]))
    sa, sb = a.value.shape, b.value.shape
    return _result(a.value / b.value,
                   ((a, lambda g: _unbroadcast(div(g, b), sa)),
                    (b, lambda g: _unbroadcast(neg(div(mul(g, a), square(b))), sb))))


def neg(a):
    a = as_node(a)
    return _result(-a.value, ((a, lambda g: neg(g)),))


def exp(a):
    a = as_node(a)
    out = _result(np.exp(a.value), ())
    out.parents = ((a, lambda g: mul(g, out)),) if a.requires_grad else ()
    out.requires_grad = a.requires_grad
    return out


def log(a):
    a = as_node(a)
    bad = np.flatnonzero(a.value <= 0.0)
    if bad.size:
        raise DomainError("log: operand is <= 0 at flat index %d (value %r)"
                          % (bad[0], float(a.value.flat[bad[0]])),
                          index=int(bad[0]))
    return _result(np.log(a.value), ((a, lambda g: div(g, a)),))


def absolute(a):
    # Subgradient at 0 is fixed to 0, so second derivatives vanish a.e.
    a = as_node(a)
    sign = constant(np.sign(a.value))
    return _result(np.abs(a.value), ((a, lambda g: mul(g, sign)),))


def tanh(a):
    a = as_node(a)
    out = _result(np.tanh(a.value), ())
    if a.requires_grad:
        out.parents = ((a, lambda g: mul(g, sub(1.0, square(out)))),)
        out.requires_grad = True
    return out


def square(a):
    a = as_node(a)
    return _result(a.value * a.value, ((a, lambda g: mul(g, mul(a, 2.0))),))


def sigmoid(a):
    a = as_node(a)
    out = _result(expit(a.value), ())
    if a.requires_grad:
        out.parents = ((a, lambda g: mul(g, mul(out, sub(1.0, out)))),)
        out.requires_grad = True
    return out


def softplus(a):
    a = as_node(a)
    return _result(np.logaddexp(0.0, a.value), ((a, lambda g: mul(g, sigmoid(a))),))


_ELEMENTWISE = {
    "add": (add, 2), "sub": (sub, 2), "mul": (mul, 2), "div": (div, 2),
    "exp": (exp, 1), "log": (log, 1), "abs": (absolute, 1), "tanh": (tanh, 1),
    "square": (square, 1), "sigmoid": (sigmoid, 1), "softplus": (softplus, 1),
}


def elementwise(op, *operands):
    """Apply a named elementwise operation to node/array operands."""
    if op not in _ELEMENTWISE:
        raise InputError("elementwise: unknown op %r (known: %s)"
                         % (op, ", ".join(sorted(_ELEMENTWISE))))
    fn, arity = _ELEMENTWISE[op]
    if len(operands) != arity:
        raise InputError("elementwise: op %r takes %d operand(s), got %d"
                         % (op, arity, len(operands)))
    return fn(*operands)


# ---------------------------------------------------------------------------
# shape operations


def reshape(a, shape):
    a = as_node(a)
    try:
        new = np.reshape(a.value, shape)
    except ValueError as err:
        raise InputError("reshape: %s" % err) from None
    old_shape = a.value.shape
    return _result(np.ascontiguousarray(new), ((a, lambda g: reshape(g, old_shape)),))


def transpose(a):
    a = as_node(a)
    if a.value.ndim != 2:
        raise InputError("transpose expects a 2-D array, got shape %s" % (a.value.shape,))
    return _result(np.ascontiguousarray(a.value.T), ((a, lambda g: transpose(g)),))


def matmul(a, b):
    a = as_node(a)
    b = as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise InputError("matmul expects 2-D operands, got shapes %s and %s"
                         % (a.value.shape, b.value.shape))
    if a.value.shape[1] != b.value.shape[0]:
        raise InputError("matmul: inner dimensions differ (%s vs %s)"
                         % (a.value.shape, b.value.shape))
    return _result(a.value @ b.value,
                   ((a, lambda g: matmul(g, transpose(b))),
                    (b, lambda g: matmul(transpose(a), g))))


def expand_rows(a, n):
    """Tile a 1-D vector into n identical rows (bias broadcast for batches)."""
    a = as_node(a)
    if a.value.ndim != 1:
        raise InputError("expand_rows expects a 1-D array, got shape %s" % (a.value.shape,))
    if n < 1:
        raise InputError("expand_rows: n must be >= 1")
    value = np.ascontiguousarray(np.broadcast_to(a.value, (n, a.value.shape[0])))
    return _result(value, ((a, lambda g: reduce_sum(g, axis=0)),))


def take_rows(a, i0, i1):
    a = as_node(a)
    if a.value.ndim != 2:
        raise InputError("take_rows expects a 2-D array")
    m = a.value.shape[0]
    if not (0 <= i0 < i1 <= m):
        raise InputError("take_rows: bad row range [%d, %d) for %d rows" % (i0, i1, m))
    return _result(np.ascontiguousarray(a.value[i0:i1]),
                   ((a, lambda g: _pad_rows(g, i0, m)),))


def _pad_rows(a, i0, total):
    a = as_node(a)
    k = a.value.shape[0]
    value = np.zeros((total, a.value.shape[1]))
    value[i0:i0 + k] = a.value
    return _result(value, ((a, lambda g: take_rows(g, i0, i0 + k)),))


def take_cols(a, j0, j1):
    a = as_node(a)
    if a.value.ndim != 2:
        raise InputError("take_cols expects a 2-D array")
    m = a.value.shape[1]
    if not (0 <= j0 < j1 <= m):
        raise InputError("take_cols: bad column range [%d, %d) for %d columns" % (j0, j1, m))
    return _result(np.ascontiguousarray(a.value[:, j0:j1]),
                   ((a, lambda g: _pad_cols(g, j0, m)),))


def _pad_cols(a, j0, total):
    a = as_node(a)
    k = a.value.shape[1]
    value = np.zeros((a.value.shape[0], total))
    value[:, j0:j0 + k] = a.value
    return _result(value, ((a, lambda g: take_cols(g, j0, j0 + k)),))


def concat_rows(parts):
    """Stack 2-D nodes vertically."""
    parts = [as_node(p) for p in parts]
    if not parts:
        raise InputError("concat_rows needs at least one part")
    cols = parts[0].value.shape[1]
    for p in parts:
        if p.value.ndim != 2 or p.value.shape[1] != cols:
            raise InputError("concat_rows: all parts must be 2-D with equal column counts")
    value = np.concatenate([p.value for p in parts], axis=0)
    links = []
    r = 0
    for p in parts:
        k = p.value.shape[0]
        links.append((p, (lambda r0, r1: lambda g: take_rows(g, r0, r1))(r, r + k)))
        r += k
    return _result(value, links)


def concat_cols(parts):
    """Stack 2-D nodes horizontally."""
    parts = [as_node(p) for p in parts]
    if not parts:
        raise InputError("concat_cols needs at least one part")
    rows = parts[0].value.shape[0]
    for p in parts:
        if p.value.ndim != 2 or p.value.shape[0] != rows:
            raise InputError("concat_cols: all parts must be 2-D with equal row counts")
    value = np.concatenate([p.value for p in parts], axis=1)
    links = []
    c = 0
    for p in parts:
        k = p.value.shape[1]
        links.append((p, (lambda c0, c1: lambda g: take_cols(g, c0, c1))(c, c + k)))
        c += k
    return _result(value, links)


# ---------------------------------------------------------------------------
# reductions


def _expand_axis(a, axis, size):
    a = as_node(a)
    value = np.ascontiguousarray(
        np.broadcast_to(np.expand_dims(a.value, axis),
                        a.value.shape[:axis] + (size,) + a.value.shape[axis:]))
    return _result(value, ((a, lambda g: reduce_sum(g, axis=axis)),))


def _check_axis(arr, axis):
    if not -arr.ndim <= axis < arr.ndim:
        raise InputError("reduce: axis %d out of range for shape %s" % (axis, arr.shape))
    return axis % arr.ndim if arr.ndim else 0


def reduce_sum(a, axis=None):
    a = as_node(a)
    if axis is None:
        ones = constant(np.ones_like(a.value))
        return _result(np.asarray(a.value.sum()), ((a, lambda g: mul(g, ones)),))
    axis = _check_axis(a.value, axis)
    size = a.value.shape[axis]
    return _result(np.ascontiguousarray(a.value.sum(axis=axis)),
                   ((a, lambda g: _expand_axis(g, axis, size)),))


def reduce_mean(a, axis=None):
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[_check_axis(a.value, axis)]
    return mul(reduce_sum(a, axis=axis), 1.0 / n)


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean}


def reduce(op, a, axis=None):
    """Apply a named reduction ('sum' or 'mean') over all entries or one axis."""
    if op not in _REDUCE:
        raise InputError("reduce: unknown op %r" % (op,))
    return _REDUCE[op](a, axis=axis)


# ---------------------------------------------------------------------------
# differentiation


def _topo(root):
    # Iterative post-order over the requires_grad subgraph.
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(output, wrt, create_graph=False):
    """Gradients of a scalar output with respect to a list of nodes.

    With create_graph=True the returned nodes stay connected to the
    graph, so they can be differentiated again.  A wrt node that the
    output does not depend on yields zeros plus an
    UnreachableGradientWarning.
    """
    if not isinstance(output, DiffNode):
        raise InputError("grad: output must be a DiffNode")
    if output.value.size != 1:
        raise InputError("grad: output must be scalar, got shape %s" % (output.value.shape,))
    wrt = list(wrt)
    for w in wrt:
        if not isinstance(w, DiffNode):
            raise InputError("grad: wrt entries must be DiffNodes")

    order = _topo(output)
    grads = {id(output): constant(np.ones_like(output.value))}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            if not parent.requires_grad:
                continue
            contribution = vjp(g)
            held = grads.get(id(parent))
            grads[id(parent)] = contribution if held is None else add(held, contribution)

    results = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            warnings.warn("grad: wrt node (shape %s) is unreachable from the output; "
                          "returning zeros" % (w.value.shape,),
                          UnreachableGradientWarning, stacklevel=2)
            g = constant(np.zeros_like(w.value))
        results.append(g if create_graph else DiffNode(g.value))
    return results


@dataclass
class GradientReport:
    """Side-by-side analytic and central-difference gradients."""

    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float

    def to_json(self):
        return json.dumps({
            "analytic": self.analytic.tolist(),
            "numeric": self.numeric.tolist(),
            "max_rel_error": self.max_rel_error,
        })


def check_gradient(f, point, h=1e-5):
    """Compare reverse-mode gradients of f against central differences.

    Args:
        f: callable taking a list of DiffNode parameters, returning a
            scalar DiffNode.  Must be deterministic.
        point: one ndarray or a list of ndarrays, the evaluation point.
        h: central-difference step, must be positive.

    Returns:
        GradientReport over the concatenated flattened parameters.  The
        relative error denominator is max(|analytic|, |numeric|, 1e-8)
        per coordinate.
    """
    if h <= 0:
        raise InputError("check_gradient: h must be positive")
    single = not isinstance(point, (list, tuple))
    pts = [np.array(point, dtype=np.float64)] if single else [
        np.array(p, dtype=np.float64) for p in point]

    params = [parameter(p) for p in pts]
    out = f(params)
    if not isinstance(out, DiffNode) or out.value.size != 1:
        raise InputError("check_gradient: f must return a scalar DiffNode")
    if not np.isfinite(out.value).all():
        raise NumericError("check_gradient: f is non-finite at the evaluation point")
    analytic = np.concatenate([g.value.ravel() for g in grad(out, params)])

    def value_at(arrays):
        v = f([parameter(p) for p in arrays]).value
        if not np.isfinite(v).all():
            raise NumericError("check_gradient: f produced a non-finite probe value")
        return float(v)

    numeric = np.empty_like(analytic)
    pos = 0
    for i, p in enumerate(pts):
        flat = p.ravel()
        for j in range(flat.size):
            bumped = [q.copy() for q in pts]
            bumped[i].ravel()[j] = flat[j] + h
            up = value_at(bumped)
            bumped[i].ravel()[j] = flat[j] - h
            down = value_at(bumped)
            numeric[pos] = (up - down) / (2.0 * h)
            pos += 1
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
    return GradientReport(analytic=analytic, numeric=numeric, max_rel_error=max_rel)
