"""Plants, controllers, zero-order-hold step maps and closed-loop maps.

All maps are vectorised over leading batch dimensions: states have shape
``(..., n)``, inputs ``(..., m)``, errors ``(..., q)`` and sampling periods
``(...)``.  The norm is Euclidean throughout.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .errors import EmptyDomain, FiniteEscape, InvalidExpression
from .expr import Expr

ESCAPE_CAP = 1e9
C_FLOOR = 1e-12


class Method(enum.Enum):
    EULER = "euler"
    RK4 = "rk4"
    TIGHT = "exact"
    ANALYTIC = "analytic"


def _vec(a, dim):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.shape[-1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class VectorField:
    """Continuous-time plant ``xdot = f(x, u)``."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    n: int
    m: int
    name: str = "f"

    def __call__(self, x, u):
        x = _vec(x, self.n)
        u = _vec(u, self.m)
        return np.asarray(self.fn(x, u), dtype=float)

    @classmethod
    def from_exprs(cls, exprs, n=None, m=None, name=None):
        """Build from component expressions over ``x1..xn`` and ``u1..um``."""
        compiled, n, dims = _compile_components(exprs, ("x", "u"), {"x": n, "u": m})
        m = dims["u"] or 1

        def fn(x, u):
            env = _env(x, "x", n) | _env(u, "u", m)
            return _stack(compiled, env, np.broadcast_shapes(x.shape[:-1], u.shape[:-1]))

        return cls(fn, n, m, name or ";".join(e.text for e in compiled))


@dataclass(frozen=True)
class Controller:
    """Sampled controller ``u = U(x, e, T)``."""

    fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    q: int
    m: int
    name: str = "U"

    def __call__(self, x, e, T):
        return np.asarray(self.fn(x, e, T), dtype=float)

    @classmethod
    def from_exprs(cls, exprs, n, q=None, name=None):
        """Build from component expressions over ``x1..xn``, ``e1..eq`` and ``T``."""
        compiled, m, dims = _compile_components(exprs, ("x", "e", "T"), {"x": n, "e": q})
        q = dims["e"] or 1

        def fn(x, e, T):
            env = _env(x, "x", n) | _env(e, "e", q) | {"T": np.asarray(T, dtype=float)}
            shape = np.broadcast_shapes(x.shape[:-1], e.shape[:-1], np.shape(T))
            return _stack(compiled, env, shape)

        return cls(fn, q, m, name or ";".join(e.text for e in compiled))


@dataclass(frozen=True)
class DiscreteStepMap:
    """Zero-order-hold discretisation ``x+ = F(x, u, T)`` of a vector field."""

    method: Method
    field: VectorField | None = None
    tolerance: float = 1e-10
    escape_cap: float = ESCAPE_CAP
    analytic: Callable | None = None

    def __call__(self, x, u, T):
        return discretize_step(self, x, u, T)


@dataclass(frozen=True)
class ClosedLoopModel:
    """Closed-loop map ``x+ = Fbar(x, e, T)``.

    Either composed from a step map and a controller, or given directly as an
    analytic map.  For disturbance models the error argument plays the role
    of the disturbance ``d``.
    """

    n: int
    q: int
    step: DiscreteStepMap | None = None
    controller: Controller | None = None
    analytic: Callable | None = None
    name: str = "model"
    caveats: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.analytic is None and (self.step is None or self.controller is None):
            raise ValueError("closed loop needs an analytic map or a step map plus controller")

    def __call__(self, x, e, T):
        return closed_loop_step(self, x, e, T)


def discretize_step(step: DiscreteStepMap, x, u, T):
    """One sampling period of the plant with the input held constant."""
    T = np.asarray(T, dtype=float)
    if step.method is Method.ANALYTIC:
        return np.asarray(step.analytic(x, u, T), dtype=float)
    f = step.field
    x = _vec(x, f.n)
    u = _vec(u, f.m)
    Tc = T[..., None]
    if step.method is Method.EULER:
        return x + Tc * f(x, u)
    if step.method is Method.RK4:
        k1 = f(x, u)
        k2 = f(x + 0.5 * Tc * k1, u)
        k3 = f(x + 0.5 * Tc * k2, u)
        k4 = f(x + Tc * k3, u)
        return x + Tc / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if step.method is Method.TIGHT:
        return _tight_step(step, x, u, T)
    raise ValueError(f"unknown method {step.method}")


def _tight_step(step, x, u, T):
    """Adaptive integration of every batch point over its own period.

    Time is rescaled to tau in [0, 1] (dz/dtau = T f(z, u)) so the whole batch
    shares one integration.
    """
    f = step.field
    shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], T.shape)
    xb = np.broadcast_to(x, shape + (f.n,)).reshape(-1, f.n)
    ub = np.broadcast_to(u, shape + (f.m,)).reshape(-1, f.m)
    Tb = np.broadcast_to(T, shape).reshape(-1, 1)
    if np.any(Tb <= 0):
        raise ValueError("sampling periods must be positive")
    nb = xb.shape[0]
    cap = step.escape_cap

    def rhs(_, z):
        return (Tb * f(z.reshape(nb, f.n), ub)).ravel()

    def blowup(_, z):
        return cap - np.max(np.abs(z))

    blowup.terminal = True
    with np.errstate(over="ignore", invalid="ignore"):
        sol = solve_ivp(rhs, (0.0, 1.0), xb.ravel(), method="DOP853",
                        rtol=step.tolerance, atol=step.tolerance, events=blowup)
    if sol.status == 1:
        raise FiniteEscape("state norm exceeded escape cap", time=float(sol.t_events[0][0]))
    if sol.status != 0 or not np.all(np.isfinite(sol.y[:, -1])):
        raise FiniteEscape(f"integration failed: {sol.message}")
    return sol.y[:, -1].reshape(shape + (f.n,))


def closed_loop_step(model: ClosedLoopModel, x, e, T):
    """Evaluate ``Fbar(x, e, T) = F(x, U(x, e, T), T)``."""
    x = _vec(x, model.n)
    e = _vec(e, model.q)
    T = np.asarray(T, dtype=float)
    if model.analytic is not None:
        return np.asarray(model.analytic(x, e, T), dtype=float)
    u = model.controller(x, e, T)
    return discretize_step(model.step, x, u, T)


# --- Appendix-style existence horizon and Lipschitz estimates -------------


def _box(box):
    arr = np.asarray(box, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("box must be a sequence of (lo, hi) pairs")
    if np.any(arr[:, 0] > arr[:, 1]):
        raise EmptyDomain(f"empty box {arr.tolist()}")
    return arr


def _axis_grid(box, points):
    axes = [np.linspace(lo, hi, points) if hi > lo else np.array([lo]) for lo, hi in box]
    return axes


def _product(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class HorizonEstimate:
    Tstar: float
    r: float
    C: float
    unbounded: bool = False


def existence_horizon(f: VectorField, x_box, u_box, points: int = 401,
                      safety: float = 1.1, chunk: int = 1 << 20) -> HorizonEstimate:
    """Estimate ``T* = r / C`` guaranteeing solutions from ``x_box`` exist on [0, T*).

    ``r = max(1, max |x| over x_box)`` and ``C`` is the grid maximum of
    ``|f(x, u)|`` over ``{|x| <= 2r} x u_box``, multiplied by ``safety``.
    """
    xb = _box(x_box)
    ub = _box(u_box)
    if xb.shape[0] != f.n or ub.shape[0] != f.m:
        raise ValueError("box dimensions do not match the vector field")
    corner = np.max(np.abs(xb), axis=1)
    r = max(1.0, float(np.linalg.norm(corner)))
    big = np.tile([-2 * r, 2 * r], (f.n, 1))
    xs = _product(_axis_grid(big, points))
    xs = xs[np.linalg.norm(xs, axis=1) <= 2 * r * (1 + 1e-12)]
    if f.n == 1:
        xs = np.array([[-2 * r], [2 * r]]) if len(xs) == 0 else xs
    us = _product(_axis_grid(ub, points))
    cmax = 0.0
    step = max(1, chunk // len(us))
    for i in range(0, len(xs), step):
        xc = xs[i:i + step]
        vals = f(xc[:, None, :], us[None, :, :])
        cmax = max(cmax, float(np.max(np.linalg.norm(vals, axis=-1))))
    C = cmax * safety
    unbounded = C < C_FLOOR
    C = max(C, C_FLOOR)
    return HorizonEstimate(Tstar=r / C, r=r, C=C, unbounded=unbounded)


def lipschitz_estimate(f: VectorField, x_box, u, points: int = 401, safety: float = 1.0) -> float:
    """Largest chord slope of ``x -> f(x, u)`` between grid neighbours on ``x_box``."""
    xb = _box(x_box)
    u = _vec(u, f.m)
    axes = _axis_grid(xb, points)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = f(mesh, u)
    L = 0.0
    for axis in range(f.n):
        if len(axes[axis]) < 2:
            continue
        dv = np.diff(vals, axis=axis)
        dx = np.diff(mesh, axis=axis)
        num = np.linalg.norm(dv, axis=-1)
        den = np.linalg.norm(dx, axis=-1)
        L = max(L, float(np.max(num / den)))
    return L * safety


# --- expression-built models and the registry ------------------------------

_VAR_RE = re.compile(r"^([a-zA-Z]+)(\d*)$")


def _compile_components(exprs, prefixes, dims):
    if isinstance(exprs, str):
        exprs = [p for p in exprs.split(";") if p.strip()]
    compiled = [e if isinstance(e, Expr) else Expr(e) for e in exprs]
    found = {p: 0 for p in prefixes}
    for ex in compiled:
        for var in ex.variables:
            m = _VAR_RE.match(var)
            if not m or m.group(1) not in prefixes:
                raise InvalidExpression(f"unknown variable {var!r} (allowed prefixes {prefixes})")
            idx = int(m.group(2)) if m.group(2) else 1
            found[m.group(1)] = max(found[m.group(1)], idx)
    out_dims = {}
    for p in prefixes:
        if p == "T":
            continue
        declared = dims.get(p)
        if declared is not None and found[p] > declared:
            raise InvalidExpression(f"{p}{found[p]} used but dimension is {declared}")
        out_dims[p] = declared if declared is not None else found[p]
    return compiled, len(compiled), out_dims


def _env(a, prefix, dim):
    a = np.asarray(a, dtype=float)
    env = {f"{prefix}{i + 1}": a[..., i] for i in range(dim)}
    if dim >= 1:
        env[prefix] = a[..., 0]
    return env


def _stack(compiled, env, batch_shape):
    cols = [np.broadcast_to(np.asarray(ex(**{k: env[k] for k in ex.variables}), dtype=float),
                            batch_shape) for ex in compiled]
    return np.stack(cols, axis=-1)


def analytic_model(exprs, n=None, q=None, name=None) -> ClosedLoopModel:
    """Closed-loop map given directly by expressions over x, e and T."""
    compiled, n_out, dims = _compile_components(exprs, ("x", "e", "T"), {"x": n, "e": q})
    n = n_out
    q = max(dims["e"], 1)
    if dims["x"] > n:
        raise InvalidExpression("map uses more state components than it defines")

    def fn(x, e, T):
        shape = np.broadcast_shapes(x.shape[:-1], e.shape[:-1], np.shape(T))
        env = _env(x, "x", n) | _env(e, "e", q) | {"T": np.asarray(T, dtype=float)}
        return _stack(compiled, env, shape)

    return ClosedLoopModel(n=n, q=q, analytic=fn, name=name or "map:" + ";".join(c.text for c in compiled))


def composed_model(plant, controller, method="euler", n=None, q=None, tolerance=1e-10,
                   name=None) -> ClosedLoopModel:
    """ZOH closed loop of a plant ``f(x, u)`` and a controller ``U(x, e, T)``."""
    method = Method(method)
    ctrl_exprs = controller
    if isinstance(ctrl_exprs, str):
        ctrl_exprs = [p for p in ctrl_exprs.split(";") if p.strip()]
    plant_exprs = plant if not isinstance(plant, str) else [p for p in plant.split(";") if p.strip()]
    f = VectorField.from_exprs(plant_exprs, n=n, m=len(ctrl_exprs))
    U = Controller.from_exprs(ctrl_exprs, n=f.n, q=q)
    step = DiscreteStepMap(method, f, tolerance=tolerance)
    caveats = ()
    if method is Method.TIGHT:
        caveats = ("exact model surrogated by adaptive integration; uniqueness of solutions assumed",)
    return ClosedLoopModel(n=f.n, q=U.q, step=step, controller=U,
                           name=name or f"{method.value}:{f.name}|{U.name}", caveats=caveats)


def _builtin(name):
    if name == "paper_example":
        from .example import example_closed_loop

        return example_closed_loop()
    if name == "identity":
        return ClosedLoopModel(1, 1, analytic=lambda x, e, T: x.copy() + 0 * e, name=name)
    if name == "zero":
        return ClosedLoopModel(1, 1, analytic=lambda x, e, T: 0.0 * x + 0.0 * e, name=name)
    if name == "growth":
        return ClosedLoopModel(1, 1, analytic=lambda x, e, T: x + np.asarray(T)[..., None] * x, name=name)
    if name == "drift":
        return ClosedLoopModel(1, 1, analytic=lambda x, e, T: x + np.asarray(T)[..., None] + 0 * e,
                               name=name)
    return None


BUILTIN_MODELS = ("paper_example", "identity", "zero", "growth", "drift")


def parse_model(ref) -> ClosedLoopModel:
    """Resolve a model reference.

    Accepted forms: a built-in name (``paper_example``, ``identity``,
    ``zero``, ``growth`` for x+ = x + T x, ``drift`` for x+ = x + T);
    ``map:<F1;F2;...>`` for an analytic closed-loop map in x, e, T;
    ``<method>:<f>|<U>`` with method in euler/rk4/exact, plant components over
    x, u and controller components over x, e, T; ``<method>:<g>`` for a
    closed-loop vector field g(x, e) held over the period; or a mapping with
    keys ``plant``, ``controller``, ``method``.
    """
    if isinstance(ref, ClosedLoopModel):
        return ref
    if isinstance(ref, dict):
        if "map" in ref:
            return analytic_model(ref["map"], n=ref.get("n"), q=ref.get("q"))
        return composed_model(ref["plant"], ref["controller"], ref.get("method", "euler"),
                              n=ref.get("n"), q=ref.get("q"), tolerance=ref.get("tolerance", 1e-10))
    if not isinstance(ref, str):
        raise InvalidExpression(f"bad model reference {ref!r}")
    model = _builtin(ref)
    if model is not None:
        return model
    head, sep, body = ref.partition(":")
    if not sep:
        raise InvalidExpression(f"unknown model {ref!r}; built-ins are {BUILTIN_MODELS}")
    if head == "map":
        return analytic_model(body)
    if head not in ("euler", "rk4", "exact"):
        raise InvalidExpression(f"unknown model kind {head!r}")
    if "|" in body:
        plant, ctrl = body.split("|", 1)
        return composed_model(plant, ctrl, head)
    # closed-loop field g(x, e): plant input carries the measured error
    exprs = [p for p in body.split(";") if p.strip()]
    compiled, n, dims = _compile_components(exprs, ("x", "e"), {"x": None, "e": None})
    q = max(dims["e"], 1)
    plant = [re.sub(r"\be(\d*)\b", r"u\1", c.text) for c in compiled]
    ctrl = [f"e{i + 1}" for i in range(q)]
    return composed_model(plant, ctrl, head, n=n, q=q, name=ref)


def product_grid(box, points):
    """Uniform tensor grid over a box, returned as an ``(N, dim)`` array."""
    return _product(_axis_grid(_box(box), points))


def ball_points(radius, dim, points, include_center=True):
    """Tensor grid of the cube [-r, r]^dim restricted to the closed ball of radius r."""
    if radius <= 0:
        return np.zeros((1, dim))
    box = np.tile([-radius, radius], (dim, 1))
    pts = product_grid(box, points)
    pts = pts[np.linalg.norm(pts, axis=1) <= radius * (1 + 1e-12)]
    if include_center and not np.any(np.all(pts == 0, axis=1)):
        pts = np.vstack([np.zeros((1, dim)), pts])
    return pts


__all__ = [
    "Method", "VectorField", "Controller", "DiscreteStepMap", "ClosedLoopModel",
    "discretize_step", "closed_loop_step", "existence_horizon", "lipschitz_estimate",
    "HorizonEstimate", "parse_model", "analytic_model", "composed_model", "product_grid",
    "ball_points", "BUILTIN_MODELS",
]
