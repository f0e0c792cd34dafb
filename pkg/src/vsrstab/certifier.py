"""Grid certification of Lyapunov sandwich and decrease conditions.

Every verdict here is evidence on a finite grid, never a proof.  Reports
always carry the grid resolution and a caveat to that effect.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .comparison import ComparisonFn, comparison_fn
from .errors import FiniteEscape, NoneCertified, OriginNotFixed
from .expr import Expr
from .models import ClosedLoopModel, ball_points

GRID_CAVEAT = "finite-grid evidence only; not a proof"
UNIQUE_DELTA_CAVEAT = "delta(eps) verified only for the probed region; independence from M not checked"
ORIGIN_ATOL = 1e-12
DEFAULT_AXIS_POINTS = 33
DEFAULT_T_POINTS = 32
DEFAULT_LHS_SAMPLES = 4096
POINT_CHUNK = 1 << 18


class Mode(enum.Enum):
    RSSVSR = "rss"
    SISSVSR = "siss"


class Verdict(enum.Enum):
    CERTIFIED = "CertifiedOnGrid"
    VIOLATED = "ViolatedAt"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class LyapunovCandidate:
    """Lyapunov function with its comparison functions.

    ``V`` maps states of shape ``(..., n)`` to values ``(...)``; it may return
    ``inf``.  ``rho`` is only used in S-ISS mode.  ``E`` is the error bound
    (S-ISS) or the disturbance bound ``D`` (RSS).
    """

    V: Callable[[np.ndarray], np.ndarray]
    alpha1: ComparisonFn
    alpha2: ComparisonFn
    alpha3: ComparisonFn
    M: float
    E: float = 0.0
    rho: ComparisonFn | None = None
    name: str = "V"


def lyapunov_function(text: str, n: int = 1) -> Callable[[np.ndarray], np.ndarray]:
    """Compile ``V`` from an expression in ``s`` (= |x|) and/or ``x1..xn``."""
    expr = Expr(text)
    allowed = {"s", "x"} | {f"x{i + 1}" for i in range(n)}
    if expr.variables - allowed:
        raise ValueError(f"V may only use s, x, x1..x{n}")

    def V(x):
        x = np.asarray(x, dtype=float)
        env = {"s": np.linalg.norm(x, axis=-1), "x": x[..., 0]}
        env.update({f"x{i + 1}": x[..., i] for i in range(n)})
        out = expr(**{k: env[k] for k in expr.variables}) if expr.variables else expr()
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()

    V.text = text
    return V


def candidate_from_config(cfg: dict, n: int = 1) -> LyapunovCandidate:
    V = lyapunov_function(cfg["V"], n)
    return LyapunovCandidate(
        V=V,
        alpha1=comparison_fn(cfg["alpha1"]),
        alpha2=comparison_fn(cfg["alpha2"]),
        alpha3=comparison_fn(cfg["alpha3"]),
        rho=comparison_fn(cfg["rho"]) if cfg.get("rho") else None,
        M=float(cfg["M"]),
        E=float(cfg.get("E", cfg.get("D", 0.0))),
        name=cfg["V"],
    )


@dataclass
class CertificationReport:
    verdict: Verdict
    min_margin: float
    witness: dict | None = None
    grid: dict = field(default_factory=dict)
    T_used: float | None = None
    caveats: list = field(default_factory=list)
    T_max_certified: float | None = None
    lipschitz_certified: bool | None = None
    margins: np.ndarray | None = field(default=None, repr=False)
    evaluated: np.ndarray | None = field(default=None, repr=False)

    @property
    def certified(self) -> bool:
        return self.verdict is Verdict.CERTIFIED

    def to_dict(self) -> dict:
        out = {
            "verdict": self.verdict.value,
            "min_margin": _jsonable(self.min_margin),
            "witness": self.witness,
            "grid": self.grid,
            "caveats": list(self.caveats),
            "T_max_certified": self.T_max_certified,
        }
        if self.T_used is not None:
            out["T_used"] = self.T_used
        if self.lipschitz_certified is not None:
            out["lipschitz_certified"] = self.lipschitz_certified
        return out


def _jsonable(v):
    if v is None:
        return None
    v = float(v) + 0.0  # drops the sign of -0.0
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


# --- reductions --------------------------------------------------------------


def lex_argmin(values: np.ndarray, keys: np.ndarray) -> int:
    """Index of the minimum; ties broken by lexicographically smallest key row."""
    m = np.min(values)
    cand = np.flatnonzero(values == m)
    if len(cand) == 1:
        return int(cand[0])
    sub = keys[cand]
    order = np.lexsort(sub.T[::-1])
    return int(cand[order[0]])


def _reduce(parts):
    """Combine per-chunk (margin, key) minima deterministically."""
    parts = [p for p in parts if p is not None]
    if not parts:
        return None
    vals = np.array([p[0] for p in parts])
    keys = np.array([p[1] for p in parts])
    i = lex_argmin(vals, keys)
    return parts[i]


# --- sandwich ----------------------------------------------------------------


def check_sandwich(cand: LyapunovCandidate, x_points) -> CertificationReport:
    """Margins ``V(x) - alpha1(|x|)`` everywhere and ``alpha2(|x|) - V(x)`` on |x| <= M."""
    x = np.asarray(x_points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0:
        return CertificationReport(Verdict.INCONCLUSIVE, math.nan, caveats=["empty grid"])
    r = np.linalg.norm(x, axis=1)
    v = cand.V(x)
    lower = np.where(np.isinf(v), np.inf, v - cand.alpha1(r))
    inside = r <= cand.M
    upper = np.where(inside, np.where(np.isinf(v), -np.inf, cand.alpha2(r) - v), np.inf)
    margin = np.minimum(lower, upper)
    i = lex_argmin(margin, x)
    mm = float(margin[i])
    verdict = Verdict.CERTIFIED if mm >= 0 else Verdict.VIOLATED
    return CertificationReport(
        verdict, mm,
        witness={"x": x[i].tolist(), "lower_margin": _jsonable(lower[i]), "upper_margin": _jsonable(upper[i])},
        grid={"points": int(len(x)), "inside_M": int(inside.sum())},
        caveats=[GRID_CAVEAT],
    )


# --- decrease ----------------------------------------------------------------


@dataclass(frozen=True)
class DecreaseGrid:
    """Points at which the decrease condition is evaluated.

    With ``paired=False`` every x point is combined with every e point;
    with ``paired=True`` the i-th x goes with the i-th e.  Each (x, e) is
    combined with every entry of ``T_fracs`` scaled by the T bound, so
    ``T = T_bound * frac`` with fractions in (0, 1).
    """

    x: np.ndarray
    e: np.ndarray
    T_fracs: np.ndarray
    paired: bool = False
    spacing: float | None = None

    def T_values(self, T_bound):
        return T_bound * self.T_fracs


def open_fracs(N: int) -> np.ndarray:
    """``j/(N+1)`` for j = 1..N: the open interval (0, 1) without endpoints."""
    return np.arange(1, N + 1) / (N + 1)


def _axis_samples(radius, dim, points, lhs_samples, seed):
    if radius <= 0:
        return np.zeros((1, dim)), 0.0
    if dim <= 2:
        pts = ball_points(radius, dim, points)
        return pts, 2 * radius / (points - 1) * math.sqrt(dim)
    sampler = qmc.LatinHypercube(d=dim, seed=seed)
    pts = (2 * sampler.random(lhs_samples) - 1) * radius
    pts = pts[np.linalg.norm(pts, axis=1) <= radius]
    return np.vstack([np.zeros((1, dim)), pts]), None


def default_grid(n, q, M, E, points=DEFAULT_AXIS_POINTS, T_points=DEFAULT_T_POINTS,
                 lhs_samples=DEFAULT_LHS_SAMPLES, seed=0) -> DecreaseGrid:
    """Uniform per-axis grids for n, q <= 2; Latin-hypercube samples above."""
    x, hx = _axis_samples(M, n, points, lhs_samples, seed)
    e, _ = _axis_samples(E, q, points, lhs_samples, seed + 1)
    return DecreaseGrid(x, e, open_fracs(T_points), spacing=hx)


def _pairs(model, cand, mode, grid):
    """(x, e) pairs inside the certification region."""
    x = np.asarray(grid.x, dtype=float).reshape(-1, model.n)
    e = np.asarray(grid.e, dtype=float).reshape(-1, model.q)
    if grid.paired:
        X, Ev = x, e
    else:
        X = np.repeat(x, len(e), axis=0)
        Ev = np.tile(e, (len(x), 1))
    rx = np.linalg.norm(X, axis=1)
    re = np.linalg.norm(Ev, axis=1)
    keep = (rx <= cand.M) & (re <= cand.E)
    if mode is Mode.SISSVSR:
        if cand.rho is None:
            raise ValueError("S-ISS mode needs rho")
        keep &= cand.rho(re) <= rx
    return X, Ev, keep


def decrease_margin(model, cand, x, e, T):
    """``-(V(Fbar(x,e,T)) - V(x) + T alpha3(|x|))`` element-wise."""
    x = np.asarray(x, dtype=float)
    e = np.asarray(e, dtype=float)
    T = np.asarray(T, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        fx = model(x, e, T)
        vn = cand.V(fx)
        vx = cand.V(x)
        a3 = cand.alpha3(np.linalg.norm(x, axis=-1))
        return -(vn - vx + T * a3)


def _chunk_margins(model, cand, X, Ev, T):
    try:
        m = decrease_margin(model, cand, X, Ev, T)
        failed = np.zeros(len(X), dtype=bool)
    except FiniteEscape:
        m = np.empty(len(X))
        failed = np.zeros(len(X), dtype=bool)
        for i in range(len(X)):
            try:
                m[i] = decrease_margin(model, cand, X[i:i + 1], Ev[i:i + 1], T[i:i + 1])[0]
            except FiniteEscape:
                m[i] = -np.inf
                failed[i] = True
    vx = cand.V(X)
    m = np.where(np.isnan(m) & np.isfinite(vx), -np.inf, m)
    return m, failed, ~np.isfinite(vx)


def certify_decrease(model: ClosedLoopModel, cand: LyapunovCandidate, mode: Mode | str, T_bound: float,
                     grid: DecreaseGrid | None = None, lipschitz: float | None = None, workers: int = 1,
                     keep_margins: bool = False) -> CertificationReport:
    """Check ``V(Fbar(x,e,T)) - V(x) <= -T alpha3(|x|)`` on a grid.

    RSS mode ranges over |x| <= M, |d| <= D; S-ISS mode additionally requires
    ``rho(|e|) <= |x|``.  Periods are ``T_bound * j/(N+1)``.  With a
    ``lipschitz`` constant for the margin as a function of x, the report also
    states whether ``min_margin >= L * spacing / 2`` (cell-centre argument).
    """
    mode = Mode(mode)
    if not T_bound > 0:
        raise ValueError("T_bound must be positive")
    if grid is None:
        grid = default_grid(model.n, model.q, cand.M, cand.E)
    X, Ev, keep = _pairs(model, cand, mode, grid)
    X, Ev = X[keep], Ev[keep]
    Ts = grid.T_values(T_bound)
    grid_info = {
        "x_points": int(len(grid.x)), "e_points": int(len(grid.e)), "T_points": int(len(Ts)),
        "pairs_in_region": int(len(X)), "paired": grid.paired, "T_bound": float(T_bound),
        "mode": mode.value, "M": cand.M, "E": cand.E,
    }
    caveats = [GRID_CAVEAT] + list(model.caveats)
    if len(X) == 0 or len(Ts) == 0:
        return CertificationReport(Verdict.INCONCLUSIVE, math.nan, grid=grid_info, T_used=T_bound,
                                   caveats=caveats + ["empty grid"])

    per_T = max(1, POINT_CHUNK // max(len(X), 1))
    tasks = []
    for j0 in range(0, len(Ts), per_T):
        for i0 in range(0, len(X), POINT_CHUNK):
            tasks.append((j0, min(j0 + per_T, len(Ts)), i0, min(i0 + POINT_CHUNK, len(X))))

    def run(task):
        j0, j1, i0, i1 = task
        xs, es = X[i0:i1], Ev[i0:i1]
        nT = j1 - j0
        XX = np.tile(xs, (nT, 1))
        EE = np.tile(es, (nT, 1))
        TT = np.repeat(Ts[j0:j1], len(xs))
        m, failed, vinf = _chunk_margins(model, cand, XX, EE, TT)
        valid = ~vinf
        best = None
        if np.any(valid):
            keys = np.column_stack([XX, EE, TT])[valid]
            k = lex_argmin(m[valid], keys)
            best = (float(m[valid][k]), keys[k])
        out_m = m.reshape(nT, len(xs)) if keep_margins else None
        return best, int(failed.sum()), int(vinf.sum()), out_m

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    best = _reduce([r[0] for r in results])
    failed = sum(r[1] for r in results)
    n_inf = sum(r[2] for r in results)
    if failed:
        caveats.append(f"ModelEvaluationFailed at {failed} grid point(s); counted as violations")
    if n_inf:
        caveats.append(f"V(x) = inf at {n_inf} grid point(s); decrease inconclusive there")
    margins = None
    if keep_margins:
        margins = np.full((len(Ts), len(keep)), np.nan)
        full = np.empty((len(Ts), len(X)))
        for task, r in zip(tasks, results):
            j0, j1, i0, i1 = task
            full[j0:j1, i0:i1] = r[3]
        margins[:, keep] = full
    if best is None:
        return CertificationReport(Verdict.INCONCLUSIVE, math.nan, grid=grid_info, T_used=T_bound,
                                   caveats=caveats, margins=margins, evaluated=keep)
    mm, key = best
    n, q = model.n, model.q
    witness = {"x": key[:n].tolist(), "e": key[n:n + q].tolist(), "T": float(key[-1])}
    if mm < 0:
        verdict = Verdict.VIOLATED
    elif n_inf:
        verdict = Verdict.INCONCLUSIVE
    else:
        verdict = Verdict.CERTIFIED
    lip = None
    if lipschitz is not None:
        if grid.spacing is None:
            caveats.append("Lipschitz upgrade unavailable for sampled (non-tensor) grids")
        else:
            lip = bool(mm >= lipschitz * grid.spacing / 2)
            if not lip:
                caveats.append("margin below Lipschitz cell bound; grid verdict not upgraded")
    grid_info["x_spacing"] = grid.spacing
    return CertificationReport(verdict, mm, witness=witness, grid=grid_info, T_used=T_bound,
                               caveats=caveats, lipschitz_certified=lip, margins=margins, evaluated=keep)


@dataclass
class PeriodSearch:
    T_max_certified: float
    report: CertificationReport
    scan: list
    prefix: bool


def max_sampling_period(model, cand, mode, T_hi: float, coarse: int = 16, refine_tol: float = 1e-4,
                        grid: DecreaseGrid | None = None, workers: int = 1) -> PeriodSearch:
    """Largest certifiable period bound on (0, T_hi] by coarse scan then bisection.

    Assumes the certified bounds form a prefix interval; a coarse scan that
    certifies again after a failure is reported as a caveat rather than
    bisected through.
    """
    mode = Mode(mode)
    if not T_hi > 0:
        raise ValueError("T_hi must be positive")
    if grid is None:
        grid = default_grid(model.n, model.q, cand.M, cand.E)

    def cert(T):
        return certify_decrease(model, cand, mode, T, grid, workers=workers)

    scan = []
    reports = {}
    for i in range(1, coarse + 1):
        T = T_hi * i / coarse
        rep = cert(T)
        reports[T] = rep
        scan.append((T, rep.verdict.value, rep.min_margin))
    ok = [rep.certified for _, rep in reports.items()]
    if not ok[0]:
        raise NoneCertified(f"no bound certified; smallest scanned T={T_hi / coarse:g} fails",
                            report=reports[T_hi / coarse])
    first_fail = ok.index(False) if False in ok else None
    prefix = first_fail is None or not any(ok[first_fail:])
    if first_fail is None:
        rep = reports[T_hi]
        rep.caveats.append("upper end of the scan certified; true maximum may be larger")
        rep.T_max_certified = T_hi
        return PeriodSearch(T_hi, rep, scan, prefix)
    lo = T_hi * first_fail / coarse
    hi = T_hi * (first_fail + 1) / coarse
    best = reports[lo]
    while hi - lo > refine_tol:
        mid = 0.5 * (lo + hi)
        rep = cert(mid)
        if rep.certified:
            lo, best = mid, rep
        else:
            hi = mid
    if not prefix:
        best.caveats.append("certified bounds do not form a prefix interval; reported the first boundary")
    best.T_max_certified = lo
    return PeriodSearch(lo, best, scan, prefix)


# --- structural conditions -------------------------------------------------------


@dataclass
class StructuralReport:
    origin_residual: float
    eps_grid: list
    delta_table: list  # delta(eps) or None
    M_grid: list
    E_grid: list
    C_table: list  # C[i][j] for (M_i, E_j)
    T_probe: float
    delta_monotone: bool
    C_monotone: bool
    caveats: list = field(default_factory=list)

    def to_dict(self):
        return {
            "origin_residual": self.origin_residual,
            "T_probe": self.T_probe,
            "delta_table": [{"eps": e, "delta": d} for e, d in zip(self.eps_grid, self.delta_table)],
            "C_table": {"M": self.M_grid, "E": self.E_grid, "C": self.C_table},
            "delta_monotone": self.delta_monotone,
            "C_monotone": self.C_monotone,
            "caveats": self.caveats,
        }


def _grid_sup(model, xr, er, Ts, unit_x, unit_e):
    X = xr * unit_x
    E = er * unit_e
    XX = np.repeat(X, len(E), axis=0)
    EE = np.tile(E, (len(X), 1))
    best = 0.0
    for T in Ts:
        with np.errstate(over="ignore", invalid="ignore"):
            v = np.linalg.norm(model(XX, EE, np.full(len(XX), T)), axis=1)
        v = np.where(np.isnan(v), np.inf, v)
        best = max(best, float(np.max(v)))
    return best


def check_structural(model: ClosedLoopModel, T_probe: float, eps_grid, M_grid, E_grid,
                     delta_candidates=None, points: int = 17, T_points: int = DEFAULT_T_POINTS,
                     raise_on_origin: bool = True) -> StructuralReport:
    """Probe origin invariance, continuity at the origin and boundedness.

    Tables are built on nested sample sets (cumulative maxima over smaller
    radii), so delta(eps) and C(M, E) are monotone by construction of the
    evidence, mirroring the set inclusions they estimate.
    """
    if not T_probe > 0:
        raise ValueError("T_probe must be positive")
    Ts = T_probe * open_fracs(T_points)
    n, q = model.n, model.q
    with np.errstate(over="ignore", invalid="ignore"):
        f0 = model(np.zeros((len(Ts), n)), np.zeros((len(Ts), q)), Ts)
    residual = float(np.max(np.linalg.norm(f0, axis=1)))
    if raise_on_origin and residual > ORIGIN_ATOL:
        raise OriginNotFixed(f"|Fbar(0,0,T)| reaches {residual:g}", residual=residual)
    ux = ball_points(1.0, n, points)
    ue = ball_points(1.0, q, points)

    eps_grid = sorted(float(e) for e in eps_grid)
    if delta_candidates is None:
        top = max(eps_grid) if eps_grid else 1.0
        delta_candidates = np.geomspace(top * 1e-6, top * 10, 71)
    cands = np.sort(np.asarray(delta_candidates, dtype=float))
    sups = np.maximum.accumulate([_grid_sup(model, d, d, Ts, ux, ue) for d in cands])
    delta_table = []
    for eps in eps_grid:
        okc = cands[sups < eps]
        delta_table.append(float(okc.max()) if len(okc) else None)
    dvals = [d if d is not None else 0.0 for d in delta_table]
    delta_monotone = bool(np.all(np.diff(dvals) >= 0)) if len(dvals) > 1 else True

    M_grid = sorted(float(m) for m in M_grid)
    E_grid = sorted(float(e) for e in E_grid)
    C = np.array([[_grid_sup(model, m, e, Ts, ux, ue) for e in E_grid] for m in M_grid])
    C = np.maximum.accumulate(np.maximum.accumulate(C, axis=0), axis=1) if C.size else C
    C_monotone = bool(np.all(np.diff(C, axis=0) >= 0) and np.all(np.diff(C, axis=1) >= 0)) if C.size else True
    return StructuralReport(residual, eps_grid, delta_table, M_grid, E_grid, C.tolist(), T_probe,
                            delta_monotone, C_monotone, caveats=[GRID_CAVEAT, UNIQUE_DELTA_CAVEAT])
