"""Class-K, class-K-infinity and class-KL comparison functions.

Functions are immutable callables evaluated element-wise on numpy arrays.  Two
base representations exist: closed-form expressions in ``s`` (exact, used for
the polynomial certificates) and strictly increasing piecewise-linear tables
(used for numerically estimated envelopes).  Compositions, inverses, scalings
and pointwise maxima are built on top of either.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from .errors import DomainExceeded, DomainMismatch, InvalidExpression, RangeExceeded
from .expr import Expr

# bisection defaults for numerical inversion
INV_RTOL = 1e-10
INV_ATOL = 1e-14
INV_MAXITER = 200


class Kind(enum.Enum):
    K = "ClassK"
    KINF = "ClassKInfinity"


def _as_array(s):
    return np.asarray(s, dtype=float)


def _ret(x):
    return float(x) if np.ndim(x) == 0 else x


class ComparisonFn:
    """Base class: a continuous, strictly increasing map with f(0) = 0."""

    kind: Kind = Kind.KINF
    domain_hint: float = math.inf

    def __call__(self, s):
        s = _as_array(s)
        if np.any(s < 0):
            raise DomainExceeded(f"negative argument to {self!r}")
        return _ret(self._eval(s))

    def _eval(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def inverse(self, y, rtol=INV_RTOL, atol=INV_ATOL):
        y = _as_array(y)
        if np.any(y < 0):
            raise RangeExceeded("negative value cannot be inverted")
        return _ret(self._inverse(y, rtol, atol))

    def _inverse(self, y, rtol, atol):
        return bisect_inverse(self._eval, y, self.domain_hint, rtol, atol, self.kind)

    @property
    def caveats(self) -> list[str]:
        return []

    def describe(self):
        return repr(self)


class ExprFn(ComparisonFn):
    """Closed-form comparison function of the variable ``s``."""

    def __init__(self, expr: str | Expr, kind: Kind = Kind.KINF, domain_hint: float = math.inf):
        self.expr = expr if isinstance(expr, Expr) else Expr(expr)
        extra = self.expr.variables - {"s"}
        if extra:
            raise InvalidExpression(f"comparison function may only use 's', got {sorted(extra)}")
        self.kind = kind
        self.domain_hint = float(domain_hint)
        if self._eval(np.zeros(1))[0] != 0.0:
            raise InvalidExpression(f"{self.expr.text!r} does not vanish at s=0")
        self._mono = self.expr.monomial("s")

    def __repr__(self):
        return f"ExprFn({self.expr.text!r})"

    def describe(self):
        return self.expr.text

    def _eval(self, s):
        out = self.expr(s=s) if self.expr.variables else np.zeros_like(s) + self.expr()
        return np.broadcast_to(np.asarray(out, dtype=float), s.shape).copy()

    def _inverse(self, y, rtol, atol):
        if self._mono is not None:
            c, p = self._mono
            out = (y / c) ** (1.0 / p)
            if np.any(out > self.domain_hint):
                raise RangeExceeded(f"value above f(domain_hint) for {self!r}")
            return out
        return super()._inverse(y, rtol, atol)


class TableFn(ComparisonFn):
    """Strictly increasing piecewise-linear table with knots starting at (0, 0).

    Beyond the last knot the last segment is continued linearly when
    ``extrapolate`` is set; otherwise evaluation raises :class:`DomainExceeded`.
    """

    def __init__(self, s_knots, f_knots, kind: Kind = Kind.KINF, extrapolate: bool = True):
        s_knots = np.array(s_knots, dtype=float)
        f_knots = np.array(f_knots, dtype=float)
        if s_knots.ndim != 1 or s_knots.shape != f_knots.shape or len(s_knots) < 2:
            raise ValueError("table needs matching 1-d knot arrays with at least two knots")
        if s_knots[0] != 0.0 or f_knots[0] != 0.0:
            raise ValueError("table must start at (0, 0)")
        if np.any(np.diff(s_knots) <= 0) or np.any(np.diff(f_knots) <= 0):
            raise ValueError("table knots must be strictly increasing")
        s_knots.flags.writeable = False
        f_knots.flags.writeable = False
        self.s_knots = s_knots
        self.f_knots = f_knots
        self.kind = kind
        self.extrapolate = extrapolate
        self.domain_hint = float(s_knots[-1])
        self._slope = (f_knots[-1] - f_knots[-2]) / (s_knots[-1] - s_knots[-2])

    def __repr__(self):
        return f"TableFn({len(self.s_knots)} knots, up to s={self.domain_hint:g})"

    @property
    def caveats(self):
        if self.extrapolate:
            return [f"table extrapolated linearly beyond s={self.domain_hint:g}"]
        return []

    def _eval(self, s):
        beyond = s > self.domain_hint
        if np.any(beyond) and not self.extrapolate:
            raise DomainExceeded(f"s={s[beyond].max():g} beyond table domain {self.domain_hint:g}")
        out = np.interp(s, self.s_knots, self.f_knots)
        if np.any(beyond):
            out = np.where(beyond, self.f_knots[-1] + self._slope * (s - self.domain_hint), out)
        return out

    def _inverse(self, y, rtol, atol):
        top = self.f_knots[-1]
        beyond = y > top
        if np.any(beyond) and not self.extrapolate:
            raise RangeExceeded(f"value above table range {top:g}")
        out = np.interp(y, self.f_knots, self.s_knots)
        if np.any(beyond):
            out = np.where(beyond, self.domain_hint + (y - top) / self._slope, out)
        return out

    def to_pairs(self):
        return np.column_stack([self.s_knots, self.f_knots])


class ComposedFn(ComparisonFn):
    """``outer(inner(s))``.

    When outer is a non-extrapolating table, the composed domain is cut at
    ``inner^-1(outer.domain_hint)`` and arguments beyond raise DomainMismatch.
    """

    def __init__(self, outer: ComparisonFn, inner: ComparisonFn):
        self.outer = outer
        self.inner = inner
        self.kind = Kind.KINF if outer.kind is Kind.KINF and inner.kind is Kind.KINF else Kind.K
        self._limit = math.inf
        if math.isfinite(outer.domain_hint) and not getattr(outer, "extrapolate", False):
            try:
                self._limit = float(inner.inverse(outer.domain_hint))
            except RangeExceeded:
                pass
        self.domain_hint = min(inner.domain_hint, self._limit)

    def __repr__(self):
        return f"({self.outer!r} o {self.inner!r})"

    @property
    def caveats(self):
        return self.outer.caveats + self.inner.caveats

    def _eval(self, s):
        if np.any(s > self._limit * (1 + 1e-12)):
            raise DomainMismatch(f"argument beyond composed domain {self._limit:g}")
        return self.outer._eval(self.inner._eval(s))

    def _inverse(self, y, rtol, atol):
        return self.inner._inverse(self.outer._inverse(y, rtol, atol), rtol, atol)


class InverseFn(ComparisonFn):
    """The inverse of a class-K-infinity function (again class-K-infinity)."""

    def __init__(self, f: ComparisonFn, rtol=INV_RTOL, atol=INV_ATOL):
        self.f = f
        self.kind = f.kind
        self.rtol = rtol
        self.atol = atol
        self.domain_hint = math.inf
        if math.isfinite(f.domain_hint) and not getattr(f, "extrapolate", False):
            self.domain_hint = float(f._eval(np.array([f.domain_hint]))[0])

    def __repr__(self):
        return f"inv({self.f!r})"

    @property
    def caveats(self):
        return self.f.caveats

    def _eval(self, s):
        return self.f._inverse(s, self.rtol, self.atol)

    def _inverse(self, y, rtol, atol):
        return self.f._eval(y)


class ScaledFn(ComparisonFn):
    """``factor * f(s)`` with factor > 0."""

    def __init__(self, factor: float, f: ComparisonFn):
        if not factor > 0:
            raise ValueError("scale factor must be positive")
        self.factor = float(factor)
        self.f = f
        self.kind = f.kind
        self.domain_hint = f.domain_hint

    def __repr__(self):
        return f"{self.factor:g}*{self.f!r}"

    @property
    def caveats(self):
        return self.f.caveats

    def _eval(self, s):
        return self.factor * self.f._eval(s)

    def _inverse(self, y, rtol, atol):
        return self.f._inverse(y / self.factor, rtol, atol)


class MaxFn(ComparisonFn):
    """Pointwise maximum of comparison functions."""

    def __init__(self, *fns: ComparisonFn):
        if len(fns) < 2:
            raise ValueError("MaxFn needs at least two functions")
        self.fns = fns
        self.kind = Kind.KINF if any(f.kind is Kind.KINF for f in fns) else Kind.K
        self.domain_hint = min(f.domain_hint for f in fns)

    def __repr__(self):
        return "max(" + ", ".join(map(repr, self.fns)) + ")"

    @property
    def caveats(self):
        return [c for f in self.fns for c in f.caveats]

    def _eval(self, s):
        out = self.fns[0]._eval(s)
        for f in self.fns[1:]:
            out = np.maximum(out, f._eval(s))
        return out

    def _inverse(self, y, rtol, atol):
        # inverse of a max is the min of the inverses
        out = self.fns[0]._inverse(y, rtol, atol)
        for f in self.fns[1:]:
            out = np.minimum(out, f._inverse(y, rtol, atol))
        return out


def bisect_inverse(f, y, domain_hint=math.inf, rtol=INV_RTOL, atol=INV_ATOL, kind=Kind.KINF,
                   maxiter=INV_MAXITER):
    """Solve ``f(s) = y`` element-wise for a strictly increasing ``f`` with f(0) = 0.

    The bracket is grown geometrically from 1 (up to ``domain_hint``) and
    shrunk geometrically towards 0, so tiny and huge values keep full relative
    accuracy.  Bisection stops once ``hi - lo <= rtol*hi + atol*(y==0)`` and a
    final secant step is taken inside the bracket.
    """
    y = np.asarray(y, dtype=float)
    shape = y.shape
    y = y.ravel()
    out = np.zeros_like(y)
    pos = y > 0
    if not np.any(pos):
        return out.reshape(shape)
    yy = y[pos]

    if math.isfinite(domain_hint):
        hi = np.full_like(yy, domain_hint)
        top = f(hi[:1])[0]
        if np.any(yy > top):
            raise RangeExceeded(f"value {yy.max():g} above f(domain_hint)={top:g}")
    else:
        hi = np.ones_like(yy)
        for _ in range(2100):
            low = f(hi) < yy
            if not np.any(low):
                break
            hi = np.where(low, hi * 2.0, hi)
            if np.any(~np.isfinite(hi)):
                raise RangeExceeded("value outside the range of a bounded class-K function")
        else:  # pragma: no cover
            raise RangeExceeded("bracket expansion failed")
    lo = hi.copy()
    for _ in range(2100):
        high = f(lo) > yy
        if not np.any(high):
            break
        lo = np.where(high, lo * 0.5, lo)
        if np.all(lo[high] == 0.0):
            break
    # lo may equal hi when f(hi) == y exactly
    lo = np.where(f(lo) > yy, 0.0, lo)
    for _ in range(maxiter):
        width = hi - lo
        active = width > rtol * hi
        if not np.any(active):
            break
        mid = lo + 0.5 * width
        below = f(mid) <= yy
        lo = np.where(active & below, mid, lo)
        hi = np.where(active & ~below, mid, hi)
    flo, fhi = f(lo), f(hi)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(fhi > flo, (yy - flo) / (fhi - flo), 0.5)
    out[pos] = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
    return out.reshape(shape)


def eval_k(f: ComparisonFn, s):
    return f(s)


def invert_k(f: ComparisonFn, y, rtol=INV_RTOL, atol=INV_ATOL):
    return f.inverse(y, rtol, atol)


def compose_k(outer: ComparisonFn, inner: ComparisonFn) -> ComparisonFn:
    """Return ``outer o inner`` (see :class:`ComposedFn` for domain handling)."""
    return ComposedFn(outer, inner)


def _kind(v) -> Kind:
    if isinstance(v, Kind):
        return v
    try:
        return Kind[v]
    except KeyError:
        return Kind(v)


def comparison_fn(spec, kind: Kind = Kind.KINF) -> ComparisonFn:
    """Build a comparison function from a config value.

    Accepts an existing :class:`ComparisonFn`, an expression string in ``s``,
    or a mapping ``{"table": [[s, f], ...], "extrapolate": bool}``.
    """
    if isinstance(spec, ComparisonFn):
        return spec
    if isinstance(spec, str):
        return ExprFn(spec, kind)
    if isinstance(spec, dict) and "table" in spec:
        pairs = np.asarray(spec["table"], dtype=float)
        return TableFn(pairs[:, 0], pairs[:, 1], kind, spec.get("extrapolate", True))
    if isinstance(spec, dict) and "expr" in spec:
        return ExprFn(spec["expr"], _kind(spec.get("kind", kind)),
                      spec.get("domain_hint", math.inf))
    raise InvalidExpression(f"cannot build a comparison function from {spec!r}")


def is_class_k(f: ComparisonFn, samples) -> bool:
    """Sampled class-K check: f(0) = 0 and strictly increasing on ``samples``."""
    s = np.unique(np.asarray(samples, dtype=float))
    if f(0.0) != 0.0:
        return False
    vals = f(s)
    return bool(np.all(np.diff(vals) > 0))


class KLFn:
    """Base class for class-KL functions beta(s, t)."""

    def __call__(self, s, t):
        s, t = np.broadcast_arrays(_as_array(s), _as_array(t))
        if np.any(s < 0) or np.any(t < 0):
            raise DomainExceeded("KL functions take nonnegative arguments")
        return _ret(self._eval(s, t))

    def _eval(self, s, t):
        raise NotImplementedError

    @property
    def caveats(self) -> list[str]:
        return []

    def describe(self):
        return repr(self)


class ExprKL(KLFn):
    """Closed-form beta(s, t) over variables ``s`` and ``t``."""

    def __init__(self, expr: str | Expr):
        self.expr = expr if isinstance(expr, Expr) else Expr(expr)
        extra = self.expr.variables - {"s", "t"}
        if extra:
            raise InvalidExpression(f"KL expression may only use s and t, got {sorted(extra)}")

    def __repr__(self):
        return f"ExprKL({self.expr.text!r})"

    def describe(self):
        return self.expr.text

    def _eval(self, s, t):
        out = self.expr(s=s, t=t) if self.expr.variables else self.expr()
        return np.broadcast_to(np.asarray(out, dtype=float), s.shape).copy()


def is_class_kl(beta: KLFn, s_samples, t_samples, tail_t=None, tail_tol=1e-6) -> bool:
    """Sampled KL check: class-K in s per t, strictly decreasing in t per s > 0."""
    s = np.unique(np.asarray(s_samples, dtype=float))
    t = np.unique(np.asarray(t_samples, dtype=float))
    S, T = np.meshgrid(s, t, indexing="ij")
    vals = beta(S, T)
    if np.any(vals[s == 0] != 0):
        return False
    if not np.all(np.diff(vals, axis=0) > 0):
        return False
    pos = vals[s > 0]
    if not np.all(np.diff(pos, axis=1) < 0):
        return False
    if tail_t is not None:
        return bool(np.all(beta(s, np.full_like(s, tail_t)) < tail_tol))
    return True
