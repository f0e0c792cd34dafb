"""Explicit KL / K-infinity bounds from Lyapunov certificates, and checks.

The KL function induced by a decrease rate ``alpha`` is the flow of the
scalar comparison equation ``y' = -alpha(y)``.  Trajectory envelopes are
``alpha1^-1(c * beta1(alpha2(s), t))`` with ``c = 1`` for the robust-stability
construction and ``c = 2`` for the input-to-state construction, whose gain is
``gamma(s) = alpha1^-1(2 alpha2(eta(s)))``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .certifier import GRID_CAVEAT, open_fracs
from .comparison import (
    ComparisonFn,
    ComposedFn,
    InverseFn,
    KLFn,
    Kind,
    MaxFn,
    ScaledFn,
    TableFn,
)
from .errors import DomainMismatch
from .models import ClosedLoopModel, ball_points
from .trajectory import (
    Ensemble,
    ErrorSpec,
    SamplingSpec,
    gen_errors,
    gen_sampling,
    sample_ball,
    scenario_rng,
    simulate_batch,
)

ODE_RTOL = 1e-13
ODE_ATOL = 1e-13
# log-state floor at which cached flows stop; below it the last decay rate is extrapolated
LOG_FLOOR = math.log(1e-250)
FLOW_T_MAX = 1e5
SLOPE_FLOOR = 1e-9


def _log_rate(alpha, z):
    """d(log y)/dt = -alpha(y)/y at y = exp(z)."""
    y = np.exp(np.maximum(z, LOG_FLOOR - 50.0))
    return -alpha._eval(np.atleast_1d(y)) / y


def comparison_ode(alpha: ComparisonFn, s: float, t: float, rtol: float = ODE_RTOL,
                   atol: float = ODE_ATOL) -> float:
    """Solution at time ``t`` of ``y' = -alpha(y)``, ``y(0) = s``.

    Integrated adaptively in ``log y`` so that relative accuracy is kept as
    the flow decays.
    """
    if s < 0 or t < 0:
        raise ValueError("s and t must be nonnegative")
    if s == 0 or t == 0:
        return float(s)
    sol = solve_ivp(lambda _, z: _log_rate(alpha, z[0]), (0.0, float(t)), [math.log(s)],
                    method="DOP853", rtol=rtol, atol=atol)
    return float(math.exp(sol.y[0, -1]))


class ComparisonFlow(KLFn):
    """beta1(s, t): the comparison flow, evaluated through a cached dense solution.

    One trajectory is integrated from ``s_top``; since the flow is
    autonomous, ``beta1(s, t) = y(tau(s) + t)`` where ``tau(s)`` is the time
    that trajectory needs to reach ``s`` (found by Newton iteration on the
    dense output).  The cache grows when a larger ``s`` is requested.
    """

    def __init__(self, alpha: ComparisonFn, s_top: float = 1.0):
        self.alpha = alpha
        self._lock = threading.Lock()
        self._cache = None
        self._build(max(float(s_top), 1e-3))

    def __repr__(self):
        return f"ComparisonFlow({self.alpha!r})"

    def _build(self, s_top):
        z0 = math.log(s_top)

        def floor(_, z):
            return z[0] - LOG_FLOOR

        floor.terminal = True
        sol = solve_ivp(lambda _, z: _log_rate(self.alpha, z[0]), (0.0, FLOW_T_MAX), [z0],
                        method="DOP853", rtol=ODE_RTOL, atol=ODE_ATOL, dense_output=True, events=floor)
        t_end = float(sol.t[-1])
        z_end = float(sol.y[0, -1])
        rate_end = float(_log_rate(self.alpha, np.array([z_end]))[0])
        self._cache = (s_top, sol.sol, sol.t.copy(), sol.y[0].copy(), t_end, z_end, rate_end)

    def _ensure(self, s_max):
        with self._lock:
            if s_max > self._cache[0]:
                self._build(2.0 * s_max)
            return self._cache

    def _z(self, cache, t):
        _, dense, _, _, t_end, z_end, rate_end = cache
        t = np.asarray(t, dtype=float)
        inside = t <= t_end
        out = np.empty_like(t)
        if np.any(inside):
            out[inside] = dense(t[inside])[0]
        if np.any(~inside):
            out[~inside] = z_end + rate_end * (t[~inside] - t_end)
        return out

    def time_to(self, s):
        """Time for the cached trajectory to decay from ``s_top`` to ``s``."""
        s = np.asarray(s, dtype=float)
        cache = self._ensure(float(np.max(s)) if s.size else 0.0)
        _, _, tk, zk, t_end, z_end, rate_end = cache
        target = np.log(s)
        tau = np.interp(-target, -zk, tk)
        for _ in range(8):
            z = self._z(cache, tau)
            rate = np.where(tau <= t_end, _log_rate(self.alpha, z) if z.size else z, rate_end)
            step = (z - target) / rate
            tau = np.clip(tau - step, 0.0, None)
            if np.all(np.abs(step) <= 1e-15 * np.maximum(tau, 1.0)):
                break
        return tau

    def _eval(self, s, t):
        out = np.zeros(s.shape)
        pos = s > 0
        if not np.any(pos):
            return out
        sp = s[pos]
        tp = t[pos]
        uniq, inv = np.unique(sp, return_inverse=True)
        tau = self.time_to(uniq)[inv]
        cache = self._ensure(float(uniq.max()))
        vals = np.exp(self._z(cache, tau + tp))
        vals = np.where(tp == 0, sp, np.minimum(vals, sp))
        out[pos] = vals
        return out

    def exact(self, s, t):
        """Direct integration, bypassing the cache."""
        return comparison_ode(self.alpha, float(s), float(t))


class CertificateKL(KLFn):
    """``beta(s, t) = alpha1^-1(scale * beta1(alpha2(s), t))``."""

    def __init__(self, beta1: ComparisonFlow, alpha1: ComparisonFn, alpha2: ComparisonFn, scale: float = 1.0):
        self.beta1 = beta1
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.scale = float(scale)

    def __repr__(self):
        return f"CertificateKL(scale={self.scale:g}, alpha={self.beta1.alpha!r})"

    @property
    def caveats(self):
        return self.alpha1.caveats + self.alpha2.caveats

    def _eval(self, s, t):
        inner = self.alpha2._eval(s)
        return self.alpha1._inverse(self.scale * self.beta1._eval(inner, t), 1e-12, 0.0)


def _require_kinf(*fns):
    for f in fns:
        if f.kind is not Kind.KINF:
            raise DomainMismatch(f"{f!r} must be class-K-infinity for this construction")


def decrease_rate(alpha2: ComparisonFn, alpha3: ComparisonFn) -> ComparisonFn:
    """``alpha = alpha3 o alpha2^-1``."""
    return ComposedFn(alpha3, InverseFn(alpha2))


def beta_from_certificate(alpha1: ComparisonFn, alpha2: ComparisonFn, alpha3: ComparisonFn,
                          scale: float = 1.0, s_top: float = 1.0) -> CertificateKL:
    """KL bound implied by a sandwich (alpha1, alpha2) and decrease rate alpha3.

    ``scale=1`` gives the robust-stability envelope; ``scale=2`` the
    input-to-state one (paired with :func:`gamma_from_certificate`).
    """
    _require_kinf(alpha1, alpha2, alpha3)
    flow = ComparisonFlow(decrease_rate(alpha2, alpha3), s_top=float(alpha2(s_top)))
    return CertificateKL(flow, alpha1, alpha2, scale)


def gamma_from_certificate(alpha1: ComparisonFn, alpha2: ComparisonFn, eta: ComparisonFn) -> ComparisonFn:
    """``gamma(s) = alpha1^-1(2 alpha2(eta(s)))``."""
    _require_kinf(alpha1, alpha2)
    return ComposedFn(InverseFn(alpha1), ComposedFn(ScaledFn(2.0, alpha2), eta))


def inflate_M(alpha1: ComparisonFn, alpha2: ComparisonFn, M0: float, E0: float = 0.0,
              eta: ComparisonFn | None = None) -> float:
    """Certification radius ``alpha1^-1(alpha2(max(M0, eta(E0))))``."""
    base = max(M0, eta(E0) if eta is not None else 0.0)
    return float(alpha1.inverse(alpha2(base)))


@dataclass
class SigmaEta:
    s_grid: np.ndarray
    sigma: np.ndarray
    zeta: TableFn
    eta: ComparisonFn
    caveats: list = field(default_factory=list)


def monotone_majorant(s_grid, values, slope_floor: float = SLOPE_FLOOR) -> TableFn:
    """Strictly increasing piecewise-linear majorant of a nondecreasing sampled function.

    Each knot takes the value of the next sample (a nondecreasing function
    on ``(s_i, s_{i+1}]`` is bounded by its right end value), the running
    maximum makes it isotonic, and a minimum slope makes it strictly
    increasing.  Anchored at (0, 0).
    """
    s = np.asarray(s_grid, dtype=float)
    v = np.maximum.accumulate(np.asarray(values, dtype=float))
    if s[0] != 0:
        s = np.concatenate([[0.0], s])
        v = np.concatenate([[0.0], v])
    shifted = np.concatenate([v[1:], v[-1:]])
    shifted[0] = 0.0
    knots = shifted.copy()
    for i in range(1, len(knots)):
        knots[i] = max(knots[i], knots[i - 1] + slope_floor * (s[i] - s[i - 1]))
    return TableFn(s, knots, Kind.KINF, extrapolate=True)


def sigma_eta_estimate(model: ClosedLoopModel, rho: ComparisonFn, s_grid, T_bar: float,
                       points: int = 17, T_points: int = 32) -> SigmaEta:
    """Grid estimate of ``sigma(s) = sup |Fbar(x, e, T)|`` over |x| <= rho(s),
    |e| <= s, T in (0, T_bar), its majorant ``zeta`` and ``eta = max(zeta, rho)``.

    Model evaluation failures are skipped and recorded as caveats.
    """
    s_grid = np.asarray(s_grid, dtype=float)
    if np.any(np.diff(s_grid) <= 0) or np.any(s_grid < 0):
        raise ValueError("s_grid must be ascending and nonnegative")
    ux = ball_points(1.0, model.n, points)
    ue = ball_points(1.0, model.q, points)
    Ts = T_bar * open_fracs(T_points)
    caveats = [GRID_CAVEAT, "single period bound T_bar used for every s"]
    sig = np.zeros(len(s_grid))
    for i, s in enumerate(s_grid):
        X = float(rho(s)) * ux
        E = s * ue
        XX = np.repeat(X, len(E), axis=0)
        EE = np.tile(E, (len(X), 1))
        best = 0.0
        for T in Ts:
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    v = np.linalg.norm(model(XX, EE, np.full(len(XX), T)), axis=1)
            except Exception as exc:  # noqa: BLE001 - recorded, point skipped
                caveats.append(f"ModelEvaluationFailed at s={s:g}, T={T:g}: {exc}")
                continue
            v = v[np.isfinite(v)]
            if v.size:
                best = max(best, float(v.max()))
        sig[i] = best
    sig = np.maximum.accumulate(sig)
    zeta = monotone_majorant(s_grid, sig)
    return SigmaEta(s_grid, sig, zeta, MaxFn(zeta, rho), caveats)


def converse_lyapunov_estimate(model: ClosedLoopModel, alpha1: ComparisonFn, xi, T_star: float,
                               horizon: int = 50, count: int = 100, seed: int = 0, D: float = 0.0,
                               workers: int = 1) -> float:
    """Lower bound on ``sup alpha1(|x_k|) exp(2 sum T_i)`` over sampled scenarios from ``xi``.

    Scenario ``i`` draws periods i.i.d. in (0, T_star) and disturbances in the
    D-ball from its own counter-based stream, so larger ``count`` with the
    same seed evaluates a superset of scenarios.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    periods = np.stack([gen_sampling(SamplingSpec("uniform", T_star, horizon, seed=seed), i)
                        for i in range(count)])
    mode = "ball" if D > 0 else "zero"
    errs = np.stack([gen_errors(ErrorSpec(mode, D, model.q, horizon, seed=seed), i) for i in range(count)])
    ens = simulate_batch(model, np.tile(xi, (count, 1)), periods, errs, workers=workers)
    norms = ens.norms
    vals = alpha1(np.where(np.isfinite(norms), norms, 0.0)) * np.exp(2 * ens.elapsed)
    vals = np.where(np.isnan(norms), -np.inf, vals)
    vals = np.where(np.isinf(norms), np.inf, vals)
    return float(max(np.max(vals), alpha1(float(np.linalg.norm(xi)))))


def _bisect(f, lo, hi, tol=1e-10, maxiter=200):
    flo = f(lo)
    for _ in range(maxiter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo <= tol:
            break
    return 0.5 * (lo + hi)


def tbar_threshold(tol: float = 1e-10) -> float:
    """Positive root of ``T = 1 - exp(-2T)``; below it ``T <= 1 - exp(-2T)``."""
    return _bisect(lambda T: 1.0 - math.exp(-2.0 * T) - T, 0.5, 1.0, tol)


@dataclass(frozen=True)
class EnvelopeViolation:
    scenario: int
    k: int
    lhs: float
    rhs: float
    excess: float


@dataclass
class EnvelopeReport:
    violations: list
    checked_points: int
    max_excess: float
    max_ratio: float

    @property
    def ok(self):
        return not self.violations

    def to_dict(self, limit: int | None = 1000):
        vs = self.violations if limit is None else self.violations[:limit]
        return {
            "violations": [
                {"scenario": v.scenario, "k": v.k, "lhs": _num(v.lhs), "rhs": _num(v.rhs),
                 "excess": _num(v.excess)} for v in vs
            ],
            "violation_count": len(self.violations),
            "checked_points": self.checked_points,
            "max_excess": _num(self.max_excess),
            "max_ratio": _num(self.max_ratio),
        }


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def envelope_rhs(ens: Ensemble, beta: KLFn, gamma: ComparisonFn | None = None, R: float = 0.0):
    """``beta(|x0|, elapsed_k) + gamma(max_{i<k} |e_i|) + R`` per (scenario, k)."""
    s = np.linalg.norm(ens.states[:, 0], axis=-1)
    s = np.where(np.isfinite(s), s, 0.0)
    S = np.broadcast_to(s[:, None], ens.elapsed.shape)
    rhs = beta(S, ens.elapsed) + R
    if gamma is not None:
        en = np.linalg.norm(ens.errors, axis=-1)
        sup = np.zeros(ens.elapsed.shape)
        if en.shape[1]:
            sup[:, 1:] = np.maximum.accumulate(en, axis=1)
        rhs = rhs + gamma(sup)
    return rhs


def envelope_check(ens: Ensemble, beta: KLFn, gamma: ComparisonFn | None = None, R: float = 0.0,
                   rtol: float = 1e-9, atol: float = 0.0) -> EnvelopeReport:
    """Report every (scenario, k) with ``|x_k| > rhs * (1 + rtol) + atol``.

    States after divergence are skipped; an escaped (infinite) state counts
    as a violation.  ``rtol`` absorbs rounding where the envelope is tight
    by construction (for example ``beta(s, 0) = s``).
    """
    if R < 0:
        raise ValueError("R must be nonnegative")
    lhs = ens.norms
    rhs = envelope_rhs(ens, beta, gamma, R)
    valid = ~np.isnan(lhs)
    with np.errstate(invalid="ignore"):
        excess = np.where(valid, lhs - rhs, -np.inf)
        bad = valid & (lhs > rhs * (1 + rtol) + atol)
        ratio = np.where(valid & (rhs > 0), lhs / np.where(rhs > 0, rhs, 1.0), 0.0)
    idx = np.argwhere(bad)
    violations = [EnvelopeViolation(int(i), int(k), float(lhs[i, k]), float(rhs[i, k]),
                                    float(lhs[i, k] - rhs[i, k])) for i, k in idx]
    return EnvelopeReport(violations, int(valid.sum()), float(np.max(excess)) if excess.size else -math.inf,
                          float(np.max(ratio)) if ratio.size else 0.0)


@dataclass
class Lemma1Tables:
    eps_grid: list
    delta_table: list
    L_grid: list
    C_table: list
    attract_table: list
    M: float
    caveats: list = field(default_factory=list)

    def to_dict(self):
        return {
            "M": self.M,
            "delta": [{"eps": e, "delta": d} for e, d in zip(self.eps_grid, self.delta_table)],
            "C": [{"L": L, "C": _num(c)} for L, c in zip(self.L_grid, self.C_table)],
            "attract_time": [{"eps": e, "T": _num(t)} for e, t in zip(self.eps_grid, self.attract_table)],
            "caveats": self.caveats,
        }


def _probe_scenarios(model, radius, units, T_probe, D, horizon, seed):
    N = len(units)
    periods = np.stack([gen_sampling(SamplingSpec("uniform", T_probe, horizon, seed=seed), i) for i in range(N)])
    mode = "ball" if D > 0 else "zero"
    errs = np.stack([gen_errors(ErrorSpec(mode, D, model.q, horizon, seed=seed), i) for i in range(N)])
    return radius * units, periods, errs


def lemma1_probe(model: ClosedLoopModel, M: float, D: float, T_probe: float, eps_grid, L_grid,
                 count: int = 200, horizon: int = 200, seed: int = 0, delta_candidates=None,
                 workers: int = 1) -> Lemma1Tables:
    """Empirical epsilon-delta, boundedness and attraction-time tables.

    Every probe radius reuses the same unit initial directions, period and
    disturbance sequences, so the delta table is computed on nested evidence.
    Finite horizons make all entries estimates; unattained attraction times
    are reported as ``inf``.
    """
    eps_grid = sorted(float(e) for e in eps_grid)
    L_grid = sorted(float(x) for x in L_grid)
    rng = scenario_rng(seed, 0, 7)
    units = sample_ball(rng, 1.0, model.n, count)
    if count >= 2:
        units[0] = 0.0
        units[1] = np.eye(model.n)[0]  # a boundary point
    if delta_candidates is None:
        lo = min(eps_grid) * 1e-3 if eps_grid else 1e-6
        delta_candidates = np.geomspace(lo, max(M, max(eps_grid, default=1.0)), 60)
    cands = np.sort(np.asarray(delta_candidates, dtype=float))

    sups = []
    for d in cands:
        x0, P, Ev = _probe_scenarios(model, d, units, T_probe, D, horizon, seed)
        ens = simulate_batch(model, x0, P, Ev, workers=workers)
        nr = ens.norms
        sups.append(np.inf if np.any(ens.diverged_at >= 0) else float(np.nanmax(nr)))
    sups = np.maximum.accumulate(sups)
    delta_table = []
    for eps in eps_grid:
        ok = cands[sups <= eps]
        delta_table.append(float(ok.max()) if len(ok) else None)

    x0, P, Ev = _probe_scenarios(model, M, units, T_probe, D, horizon, seed)
    ens = simulate_batch(model, x0, P, Ev, workers=workers)
    nr = np.where(np.isnan(ens.norms), np.inf, ens.norms)  # NaN only follows divergence
    C_table = []
    for L in L_grid:
        within = ens.elapsed <= L
        C_table.append(float(np.max(np.where(within, nr, 0.0))))
    attract = []
    K = nr.shape[1] - 1
    for eps in eps_grid:
        worst = 0.0
        for i in range(len(nr)):
            above = np.flatnonzero(nr[i] > eps)
            if len(above) == 0:
                continue
            last = above[-1]
            if last >= K:
                worst = math.inf
                break
            worst = max(worst, float(ens.elapsed[i, last + 1]))
        attract.append(worst)
    caveats = [GRID_CAVEAT, f"finite horizon of {horizon} steps with {count} sampled scenarios",
               "delta(eps) verified only for the probed M; independence from M not checked"]
    return Lemma1Tables(eps_grid, delta_table, L_grid, C_table, attract, M, caveats)
