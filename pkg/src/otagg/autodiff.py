"""Reverse-mode automatic differentiation over numpy arrays.

A recorded computation is a DAG of :class:`Var` nodes. Every operation
below builds the output value eagerly and stores a closure that maps the
output gradient to gradient contributions for its parents. Calling
``backward`` on the final node walks the graph in reverse topological
order and accumulates ``.grad`` on every node, leaves included.

The op set is intentionally small: it covers exactly the two-layer MLPs,
the log-domain Sinkhorn iterations (differentiated by unrolling), the
aggregation/normalization chain and the mined-pair loss. Reductions that
cross rows (``logsumexp``, ``asum``) sort their operands before summing,
which makes the forward values bitwise invariant to permutations of the
reduced axis.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, UsageError


class Var:
    """One node of the recorded graph; wraps a numpy array."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"

    # Arithmetic sugar so formulas read naturally.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed=None):
        """Populate ``.grad`` on every node reachable from this one.

        ``seed`` is the upstream gradient; it defaults to 1 and is then
        only valid for scalar outputs.
        """
        if seed is None:
            if self.value.size != 1:
                raise UsageError(
                    "backward() without an explicit seed gradient requires a scalar output"
                )
            seed = np.ones_like(self.value)
        seed = np.asarray(seed, dtype=self.value.dtype)
        if seed.shape != self.value.shape:
            raise DimensionError(
                f"seed gradient shape {seed.shape} != output shape {self.value.shape}"
            )
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = seed
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def grad_or_zeros(self):
        """Gradient of the last backward pass, zeros if unreached."""
        if self.grad is None:
            return np.zeros_like(self.value)
        return self.grad

    def gradient(self):
        """Gradient of the last backward pass; raises if none was recorded
        (node not part of the differentiated graph, or backward never ran)."""
        if self.grad is None:
            raise UsageError(
                "no gradient recorded for this value; run backward() on a graph that contains it"
            )
        return self.grad


def _toposort(root: Var) -> list[Var]:
    """Reverse post-order DFS; iterative to survive deep unrolled loops."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _accum(var: Var, g: np.ndarray):
    if var.grad is None:
        var.grad = g
    else:
        var.grad = var.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = Var(a.value + b.value, (a, b))

    def _bw(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    out._backward = _bw
    return out


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = Var(a.value - b.value, (a, b))

    def _bw(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    out._backward = _bw
    return out


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = Var(a.value * b.value, (a, b))

    def _bw(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    out._backward = _bw
    return out


def div(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    out = Var(a.value / b.value, (a, b))

    def _bw(g):
        _accum(a, _unbroadcast(g / b.value, a.value.shape))
        _accum(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out._backward = _bw
    return out


def neg(a) -> Var:
    a = _wrap(a)
    out = Var(-a.value, (a,))

    def _bw(g):
        _accum(a, -g)

    out._backward = _bw
    return out


def matmul(a, b) -> Var:
    """2-D matrix product; vectors must be reshaped by the caller."""
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.value.shape} @ {b.value.shape}"
        )
    out = Var(a.value @ b.value, (a, b))

    def _bw(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    out._backward = _bw
    return out


def relu(a) -> Var:
    a = _wrap(a)
    out = Var(np.maximum(a.value, 0), (a,))

    def _bw(g):
        _accum(a, g * (a.value > 0))

    out._backward = _bw
    return out


def exp(a) -> Var:
    a = _wrap(a)
    out = Var(np.exp(a.value), (a,))

    def _bw(g):
        _accum(a, g * out.value)

    out._backward = _bw
    return out


def log(a) -> Var:
    a = _wrap(a)
    out = Var(np.log(a.value), (a,))

    def _bw(g):
        _accum(a, g / a.value)

    out._backward = _bw
    return out


def log1p(a) -> Var:
    a = _wrap(a)
    out = Var(np.log1p(a.value), (a,))

    def _bw(g):
        _accum(a, g / (1.0 + a.value))

    out._backward = _bw
    return out


def sqrt(a) -> Var:
    a = _wrap(a)
    out = Var(np.sqrt(a.value), (a,))

    def _bw(g):
        _accum(a, g * (0.5 / out.value))

    out._backward = _bw
    return out


def _sorted_sum(v: np.ndarray, axis, keepdims=False) -> np.ndarray:
    # Sorting first makes the pairwise summation independent of the
    # order of the operands along the reduced axis.
    return np.sort(v, axis=axis).sum(axis=axis, keepdims=keepdims)


def asum(a, axis=None, keepdims=False) -> Var:
    """Order-invariant sum reduction."""
    a = _wrap(a)
    if axis is None:
        out_v = _sorted_sum(a.value.reshape(-1), axis=0)
    else:
        out_v = _sorted_sum(a.value, axis=axis, keepdims=keepdims)
    out = Var(out_v, (a,))

    def _bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.value.shape).astype(a.value.dtype, copy=True))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.value.shape).astype(a.value.dtype, copy=True))

    out._backward = _bw
    return out


def logsumexp(a, axis: int, keepdims=False) -> Var:
    """Stable ``log(sum(exp(x)))`` along one axis.

    Forward subtracts the max and sums the sorted exponentials, so the
    result does not depend on the ordering of the reduced axis. Backward
    is the softmax of the inputs.
    """
    a = _wrap(a)
    v = a.value
    mx = v.max(axis=axis, keepdims=True)
    e = np.exp(v - mx)
    e.sort(axis=axis)
    s = e.sum(axis=axis, keepdims=True)
    lse = np.log(s)
    lse += mx
    out_v = lse if keepdims else np.squeeze(lse, axis=axis)
    out = Var(out_v, (a,))

    def _bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, gg * np.exp(v - lse))

    out._backward = _bw
    return out


def concat(parts: Sequence[Var | np.ndarray], axis=0) -> Var:
    parts = [_wrap(p) for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts))
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    out._backward = _bw
    return out


def reshape(a, shape) -> Var:
    a = _wrap(a)
    out = Var(a.value.reshape(shape), (a,))

    def _bw(g):
        _accum(a, g.reshape(a.value.shape))

    out._backward = _bw
    return out


def transpose(a) -> Var:
    a = _wrap(a)
    out = Var(a.value.T, (a,))

    def _bw(g):
        _accum(a, g.T)

    out._backward = _bw
    return out


def narrow(a, axis: int, start: int, stop: int) -> Var:
    """Contiguous slice along one axis."""
    a = _wrap(a)
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    out = Var(a.value[tuple(idx)], (a,))

    def _bw(g):
        full = np.zeros_like(a.value)
        full[tuple(idx)] = g
        _accum(a, full)

    out._backward = _bw
    return out


def gather(a, rows, cols) -> Var:
    """Pick entries ``a[rows[t], cols[t]]`` of a 2-D node as a 1-D node."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = Var(a.value[rows, cols], (a,))

    def _bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, (rows, cols), g)
        _accum(a, full)

    out._backward = _bw
    return out


def stack_rows(rows: Iterable[Var]) -> Var:
    """Stack 1-D nodes of equal length into a 2-D node."""
    rows = list(rows)
    return concat([reshape(r, (1, r.value.shape[0])) for r in rows], axis=0)


def l2_normalize(a) -> Var:
    """Scale a 1-D node to unit Euclidean norm; zero input passes through."""
    a = _wrap(a)
    nrm = sqrt(asum(mul(a, a)))
    if float(nrm.value) == 0.0:
        return a
    return div(a, nrm)
