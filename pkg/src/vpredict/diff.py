"""Nested forward-mode automatic differentiation.

A :class:`Dual` carries a primal value and a tangent with one leading axis per
seeded input direction.  Primal and tangent are either numpy arrays or Duals
of a lower nesting level, so a gradient call may sit inside the function being
differentiated by another gradient call.  Levels are assigned by call depth,
which keeps perturbations from different calls apart.

Values may be numpy arrays: operations act elementwise and broadcast, and a
gradient over array-valued inputs is taken per element (each element is an
independent problem sharing one pass).
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_DEPTH = 4

_DEPTH: contextvars.ContextVar[int] = contextvars.ContextVar("vpredict_diff_depth", default=0)


class NonFiniteError(FloatingPointError):
    """A value or derivative became inf/nan."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class NestingError(RuntimeError):
    pass


def _level(v) -> int:
    return v.level if isinstance(v, Dual) else 0


def _ndim(v) -> int:
    return len(v.shape) if isinstance(v, Dual) else np.ndim(v)


def _reshape(v, shape):
    if isinstance(v, Dual):
        return v.reshape(shape)
    return np.reshape(v, shape)


def _broadcast(v, shape):
    if isinstance(v, Dual):
        return v.broadcast_to(shape)
    return np.broadcast_to(v, shape)


def _lift(t, rank: int):
    # tangent (n, *s) -> (n, 1, ..., 1, *s) so that it broadcasts against rank-`rank` primals
    s = t.shape
    missing = rank + 1 - len(s)
    if missing <= 0:
        return t
    return _reshape(t, (s[0],) + (1,) * missing + tuple(s[1:]))


def _full(t, shape):
    target = (t.shape[0],) + tuple(shape)
    if tuple(t.shape) == target:
        return t
    return _broadcast(_lift(t, len(shape)), target)


class Dual:
    """Primal value plus tangent at a given nesting level."""

    __slots__ = ("level", "primal", "tangent")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, level: int, primal, tangent):
        self.level = level
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self) -> tuple:
        p = self.primal
        return p.shape if isinstance(p, Dual) else np.shape(p)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def value(self) -> np.ndarray:
        p = self.primal
        while isinstance(p, Dual):
            p = p.primal
        return p

    def __repr__(self) -> str:
        return f"Dual(level={self.level}, value={self.value!r})"

    def __len__(self) -> int:
        return self.shape[0]

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.level, self.primal[idx], self.tangent[(slice(None),) + idx])

    def reshape(self, shape) -> Dual:
        shape = tuple(shape)
        return Dual(
            self.level,
            _reshape(self.primal, shape),
            _reshape(self.tangent, (self.tangent.shape[0],) + shape),
        )

    def broadcast_to(self, shape) -> Dual:
        shape = tuple(shape)
        return Dual(self.level, _broadcast(self.primal, shape), _full(self.tangent, shape))

    def sum(self, axis=None) -> Dual:
        nd = self.ndim
        if axis is None:
            return Dual(self.level, _sum(self.primal), _sum(self.tangent, tuple(range(1, nd + 1))))
        if isinstance(axis, int):
            axis = (axis,)
        t_axis = tuple(a if a < 0 else a + 1 for a in axis)
        return Dual(self.level, _sum(self.primal, axis), _sum(self.tangent, t_axis))

    def mean(self, axis=None) -> Dual:
        shape = self.shape
        if axis is None:
            count = int(np.prod(shape))
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([shape[a] for a in axes]))
        return self.sum(axis) * (1.0 / count)

    # arithmetic -------------------------------------------------------

    def __neg__(self) -> Dual:
        return Dual(self.level, -self.primal, -self.tangent)

    def __pos__(self) -> Dual:
        return self

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(other, self)

    def __sub__(self, other):
        return _add(self, -other)

    def __rsub__(self, other):
        return _add(other, -self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __pow__(self, k):
        if isinstance(k, (int, np.integer)) and k >= 0:
            if k == 0:
                return np.ones(self.shape)
            out = self
            for _ in range(k - 1):
                out = out * self
            return out
        return exp(k * log(self))


def _sum(v, axis=None):
    if isinstance(v, Dual):
        return v.sum(axis)
    return np.sum(v, axis=axis)


def _add(a, b):
    la, lb = _level(a), _level(b)
    if la == lb:
        shape = np.broadcast_shapes(a.shape, b.shape)
        return Dual(la, a.primal + b.primal, _full(a.tangent, shape) + _full(b.tangent, shape))
    if la > lb:
        p = a.primal + b
        return Dual(la, p, _full(a.tangent, _shape(p)))
    p = a + b.primal
    return Dual(lb, p, _full(b.tangent, _shape(p)))


def _shape(v):
    return v.shape if isinstance(v, Dual) else np.shape(v)


def _mul(a, b):
    la, lb = _level(a), _level(b)
    if la == lb:
        p = a.primal * b.primal
        r = len(_shape(p))
        return Dual(la, p, _lift(a.tangent, r) * b.primal + a.primal * _lift(b.tangent, r))
    if la > lb:
        p = a.primal * b
        return Dual(la, p, _full(_lift(a.tangent, _ndim(p)) * b, _shape(p)))
    p = a * b.primal
    return Dual(lb, p, _full(a * _lift(b.tangent, _ndim(p)), _shape(p)))


def _div(a, b):
    la, lb = _level(a), _level(b)
    if la == lb:
        p = a.primal / b.primal
        r = len(_shape(p))
        t = (_lift(a.tangent, r) - p * _lift(b.tangent, r)) / b.primal
        return Dual(la, p, t)
    if la > lb:
        p = a.primal / b
        return Dual(la, p, _full(_lift(a.tangent, _ndim(p)) / b, _shape(p)))
    p = a / b.primal
    return Dual(lb, p, _full(_lift(b.tangent, _ndim(p)) * (-p / b.primal), _shape(p)))


# elementary functions -------------------------------------------------


def exp(v):
    if isinstance(v, Dual):
        p = exp(v.primal)
        return Dual(v.level, p, p * v.tangent)
    return np.exp(v)


def log(v):
    if isinstance(v, Dual):
        return Dual(v.level, log(v.primal), _scaled(v.tangent, v.primal))
    return np.log(v)


def sin(v):
    if isinstance(v, Dual):
        return Dual(v.level, sin(v.primal), cos(v.primal) * v.tangent)
    return np.sin(v)


def cos(v):
    if isinstance(v, Dual):
        return Dual(v.level, cos(v.primal), -sin(v.primal) * v.tangent)
    return np.cos(v)


def _scaled(tangent, denom):
    """tangent / denom, keeping zero tangents at zero where denom vanishes."""
    if isinstance(tangent, Dual) or isinstance(denom, Dual):
        return tangent / denom
    t = np.asarray(tangent, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = t / denom
    return np.where(t == 0.0, 0.0, q)


def sqrt(v):
    if isinstance(v, Dual):
        p = sqrt(v.primal)
        return Dual(v.level, p, _scaled(v.tangent, 2.0 * p))
    return np.sqrt(v)


def tanh(v):
    if isinstance(v, Dual):
        p = tanh(v.primal)
        return Dual(v.level, p, (1.0 - p * p) * v.tangent)
    return np.tanh(v)


def softplus(v):
    """log(1 + exp(v)), evaluated without overflow."""
    if isinstance(v, Dual):
        slope = 0.5 * (1.0 + tanh(0.5 * v.primal))
        return Dual(v.level, softplus(v.primal), slope * v.tangent)
    return np.logaddexp(0.0, v)


def square(v):
    return v * v


def value(v) -> np.ndarray:
    """Strip every derivative layer and return the plain numeric value."""
    return v.value if isinstance(v, Dual) else np.asarray(v, dtype=float)


# differentiation ------------------------------------------------------


def _seeds(at):
    n = len(at)
    out = []
    for i, a in enumerate(at):
        shape = _shape(a)
        t = np.zeros((n,) + tuple(shape))
        t[i] = 1.0
        out.append(t)
    return out


def value_and_gradient(f: Callable, at: Sequence):
    """Evaluate ``f(at)`` and its gradient with respect to every entry of ``at``.

    ``f`` receives a list of the same length as ``at``.  The returned gradient
    has a leading axis over the entries of ``at`` followed by the output shape
    of ``f``; entries that are arrays are differentiated elementwise.
    """
    at = list(at)
    n = len(at)
    if n < 1:
        raise ValueError("gradient needs at least one input")
    depth = _DEPTH.get()
    if depth >= MAX_DEPTH:
        raise NestingError(f"differentiation nested deeper than {MAX_DEPTH} levels")
    level = depth + 1
    for a in at:
        if _level(a) >= level:
            raise NestingError("input carries a perturbation from an enclosing level")
    token = _DEPTH.set(level)
    try:
        xs = [Dual(level, a if isinstance(a, Dual) else np.asarray(a, dtype=float), t)
              for a, t in zip(at, _seeds(at))]
        out = f(xs)
    finally:
        _DEPTH.reset(token)

    if _level(out) == level:
        val, grad = out.primal, out.tangent
    else:
        val = out
        grad = np.zeros((n,) + tuple(_shape(out)))
    g = value(grad)
    if not np.all(np.isfinite(g)):
        bad = np.argwhere(~np.isfinite(g.reshape(n, -1)))[0][0]
        raise NonFiniteError(f"non-finite derivative for component {bad}", index=int(bad))
    return val, grad


def gradient(f: Callable, at: Sequence):
    return value_and_gradient(f, at)[1]


def nested_gradient(f: Callable, at: Sequence):
    """Gradient of a function whose body itself differentiates.

    Identical to :func:`gradient`; kept as a separate name so call sites that
    rely on second-order flow say so.
    """
    return gradient(f, at)


def hessian(f: Callable, at: Sequence) -> np.ndarray:
    return gradient(lambda v: gradient(f, v), at)


@dataclass
class GradientCheck:
    max_rel_error: float
    passed: bool
    rows: list = field(default_factory=list)  # (index, autodiff, finite difference, rel error)

    def table(self) -> str:
        lines = [f"{'i':>3} {'autodiff':>22} {'finite diff':>22} {'rel err':>10}"]
        for i, ad, fd, err in self.rows:
            lines.append(f"{i:>3} {ad:>22.15g} {fd:>22.15g} {err:>10.3g}")
        return "\n".join(lines)


def check_gradient(f: Callable, at: Sequence, rtol: float = 1e-5, step: float = 1e-5,
                   floor: float = 1e-8) -> GradientCheck:
    """Compare the autodiff gradient of a scalar function against central differences.

    Never raises on bad derivatives; non-finite values show up as a failed check.
    """
    at = [float(a) for a in at]
    try:
        ad = np.asarray(value(gradient(f, at)), dtype=float).reshape(len(at))
    except NonFiniteError:
        ad = np.full(len(at), np.nan)
    fd = np.empty(len(at))
    with np.errstate(all="ignore"):
        for i in range(len(at)):
            hi = list(at)
            lo = list(at)
            hi[i] += step
            lo[i] -= step
            fd[i] = (float(value(f(hi))) - float(value(f(lo)))) / (2.0 * step)
        err = np.abs(ad - fd) / np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor)
    err = np.where(np.isfinite(err), err, np.inf)
    rows = [(i, float(ad[i]), float(fd[i]), float(err[i])) for i in range(len(at))]
    worst = float(np.max(err))
    return GradientCheck(max_rel_error=worst, passed=bool(worst <= rtol), rows=rows)
