"""Minimal reverse-mode differentiation over 2-D float64 arrays.

Every primitive accepts either plain ``numpy`` arrays or :class:`Var` nodes.
With arrays only, the primitive is a pure forward computation returning an
array. As soon as one input is a ``Var``, the result is a ``Var`` recorded on
that input's :class:`Tape`, so the same loss code serves both evaluation and
training::

    tape = Tape()
    x = tape.watch(param)
    loss = mean(softmax_rows(x, 1.0))
    tape.backward(loss)          # accumulates into param.grad

Subgradient convention: the derivative of ``abs``, ``relu``, ``clamp_min``,
``sqrt`` and ``power`` at their kink is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateRowError, DimensionError, EvaluationError, ParameterError

NORM_EPS = 1e-12


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous 2-D float64 array (scalars become 1x1)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got {a.ndim} dimensions")
    return np.ascontiguousarray(a)


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = as_matrix(self.value).copy()
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class Var:
    """A value recorded on a tape. Supports ``+ - * / @`` and ``.T``."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

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
        if isinstance(other, Var):
            raise TypeError("division by a Var is not a supported primitive")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Node:
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple] | None
    param: Parameter | None = None


class Tape:
    """Records primitive applications in execution (hence topological) order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []

    @property
    def parameter_ids(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.param is not None]

    def _push(self, value, inputs=(), backward=None, param=None) -> Var:
        self.nodes.append(_Node(tuple(inputs), backward, param))
        self.values.append(value)
        return Var(value, self, len(self.nodes) - 1)

    def watch(self, param: Parameter) -> Var:
        """Leaf whose adjoint is added to ``param.grad`` by :meth:`backward`."""
        return self._push(param.value, param=param)

    def constant(self, value) -> Var:
        return self._push(as_matrix(value))

    def backward(self, out: Var) -> None:
        if out.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if out.value.shape != (1, 1):
            raise DimensionError(f"backward needs a 1x1 output, got {out.value.shape}")
        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[out.index] = np.ones((1, 1))
        for i in range(out.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.param is not None:
                node.param.grad += g
            if node.backward is None:
                continue
            for j, gj in zip(node.inputs, node.backward(g)):
                if gj is None:
                    continue
                adj[j] = gj if adj[j] is None else adj[j] + gj


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
    return tape


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else as_matrix(x)


def _record(value, args, backward):
    """Wrap ``value`` in a Var when any of ``args`` is a Var.

    ``backward(g)`` returns one gradient per entry of ``args``; entries for
    non-Var args are dropped.
    """
    tape = _tape_of(*args)
    if tape is None:
        return value
    var_pos = [k for k, a in enumerate(args) if isinstance(a, Var)]
    inputs = tuple(args[k].index for k in var_pos)

    def bw(g):
        grads = backward(g)
        return tuple(grads[k] for k in var_pos)

    return tape._push(value, inputs, bw)


def _broadcast_shape(sa, sb):
    shape = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            shape.append(da)
        elif da == 1:
            shape.append(db)
        else:
            raise DimensionError(f"cannot broadcast shapes {sa} and {sb}")
    return tuple(shape)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# Linear algebra and elementwise arithmetic
# ----------------------------------------------------------------------------


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    out = av @ bv
    return _record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    av = _val(a)
    return _record(np.ascontiguousarray(av.T), (a,), lambda g: (g.T,))


def add(a, b):
    av, bv = _val(a), _val(b)
    _broadcast_shape(av.shape, bv.shape)
    out = av + bv
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))
    )


def sub(a, b):
    av, bv = _val(a), _val(b)
    _broadcast_shape(av.shape, bv.shape)
    out = av - bv
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape))
    )


def mul(a, b):
    """Elementwise product with row/column/scalar broadcasting."""
    av, bv = _val(a), _val(b)
    _broadcast_shape(av.shape, bv.shape)
    out = av * bv
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a, c: float):
    c = float(c)
    return _record(_val(a) * c, (a,), lambda g: (g * c,))


# ----------------------------------------------------------------------------
# Nonlinearities
# ----------------------------------------------------------------------------


def log(a):
    av = _val(a)
    return _record(np.log(av), (a,), lambda g: (g / av,))


def exp(a):
    out = np.exp(_val(a))
    return _record(out, (a,), lambda g: (g * out,))


def abs_(a):
    av = _val(a)
    return _record(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def relu(a):
    av = _val(a)
    return _record(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def clamp_min(a, lo: float):
    av = _val(a)
    return _record(np.maximum(av, lo), (a,), lambda g: (g * (av > lo),))


def sqrt(a):
    av = _val(a)
    out = np.sqrt(np.maximum(av, 0.0))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _record(out, (a,), bw)


def power(a, gamma: float):
    """``a ** gamma`` for non-negative ``a``."""
    gamma = float(gamma)
    av = _val(a)
    out = np.power(av, gamma)

    def bw(g):
        if gamma == 0.0:
            return (np.zeros_like(av),)
        pos = av > 0
        d = np.where(pos, gamma * np.power(np.where(pos, av, 1.0), gamma - 1.0), 0.0)
        if gamma == 1.0:
            d = np.ones_like(av)
        return (g * d,)

    return _record(out, (a,), bw)


# ----------------------------------------------------------------------------
# Row-wise operations
# ----------------------------------------------------------------------------


def row_l2_normalize(a):
    av = _val(a)
    with np.errstate(over="ignore"):
        norms = np.sqrt(np.sum(av * av, axis=1, keepdims=True))
    bad = np.flatnonzero(norms[:, 0] < NORM_EPS)
    if bad.size:
        raise DegenerateRowError(f"row {int(bad[0])} has L2 norm below {NORM_EPS}")
    out = av / norms
    big = ~np.isfinite(norms[:, 0]) & np.all(np.isfinite(av), axis=1)
    if big.any():
        # the squares overflowed: normalize the row scaled by its largest entry
        scaled = av[big] / np.max(np.abs(av[big]), axis=1, keepdims=True)
        out[big] = scaled / np.sqrt(np.sum(scaled * scaled, axis=1, keepdims=True))

    def bw(g):
        return ((g - out * np.sum(g * out, axis=1, keepdims=True)) / norms,)

    return _record(out, (a,), bw)


def softmax_rows(a, tau: float = 1.0):
    """Row softmax of ``tau * a`` using max subtraction."""
    tau = float(tau)
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    av = _val(a)
    z = tau * av
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (tau * out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return _record(out, (a,), bw)


def row_max(a):
    """Per-row maximum as an (N, 1) column; ties resolve to the lowest index."""
    av = _val(a)
    idx = np.argmax(av, axis=1)
    rows = np.arange(av.shape[0])
    out = av[rows, idx].reshape(-1, 1)

    def bw(g):
        d = np.zeros_like(av)
        d[rows, idx] = g[:, 0]
        return (d,)

    return _record(out, (a,), bw)


def pick(a, cols):
    """Gather ``a[n, cols[n]]`` into an (N, 1) column."""
    av = _val(a)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(av.shape[0])
    out = av[rows, cols].reshape(-1, 1)

    def bw(g):
        d = np.zeros_like(av)
        np.add.at(d, (rows, cols), g[:, 0])
        return (d,)

    return _record(out, (a,), bw)


# ----------------------------------------------------------------------------
# Reductions (results stay 2-D)
# ----------------------------------------------------------------------------


def sum_(a, axis: int | None = None):
    av = _val(a)
    if axis is None:
        out = np.array([[av.sum()]])
    else:
        out = av.sum(axis=axis, keepdims=True)
    return _record(out, (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def mean(a, axis: int | None = None):
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def value_of(x) -> np.ndarray:
    """Underlying array of a Var or array-like."""
    return _val(x)


def scalar(x) -> float:
    v = _val(x)
    if v.size != 1:
        raise DimensionError(f"expected a scalar, got shape {v.shape}")
    return float(v.reshape(-1)[0])


# ----------------------------------------------------------------------------
# Finite-difference checking
# ----------------------------------------------------------------------------


def grad_check(f, p: Parameter, step: float = 1e-6) -> float:
    """Max relative error between the taped gradient and central differences.

    ``f`` maps a Var or array shaped like ``p.value`` to a 1x1 result. The
    relative error per entry is ``|a - n| / max(1, |a|, |n|)``.
    """
    p.zero_grad()
    tape = Tape()
    out = f(tape.watch(p))
    if not isinstance(out, Var):
        out = tape.constant(out)
    if not np.all(np.isfinite(out.value)):
        raise EvaluationError("function value is not finite at the base point")
    tape.backward(out)
    analytic = p.grad.copy()
    p.zero_grad()

    base = p.value
    numeric = np.zeros_like(base)
    x = base.copy()
    for idx in np.ndindex(base.shape):
        orig = x[idx]
        x[idx] = orig + step
        fp = scalar(f(x))
        x[idx] = orig - step
        fm = scalar(f(x))
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"function value is not finite near entry {idx}")
        numeric[idx] = (fp - fm) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
