"""Counterexample search against envelope and decrease claims.

Random restarts draw extremal-looking scenarios (initial states in the
M0-ball, errors on the E0-sphere or zero, periods constant near the bound or
i.i.d.); the worst few are then improved by coordinate-wise hill climbing on
the initial state and on blocks of periods and errors.  Any reported witness
has been replayed through the simulator and the envelope (or margin) check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bounds import (
    beta_from_certificate,
    envelope_check,
    envelope_rhs,
    gamma_from_certificate,
    inflate_M,
    sigma_eta_estimate,
)
from .certifier import LyapunovCandidate, Mode, candidate_from_config, decrease_margin
from .comparison import ComparisonFn, ExprFn, ExprKL, KLFn, comparison_fn
from .errors import ConfigError, FiniteEscape
from .models import ClosedLoopModel
from .trajectory import OPEN_EPS, Ensemble, sample_ball, sample_sphere, scenario_rng, simulate_batch

_STREAM_SEARCH = 3
ENVELOPE_RTOL = 1e-9


@dataclass(frozen=True)
class Envelope:
    """Claim ``|x_k| <= beta(|x0|, t_k) + gamma(sup_{i<k}|e_i|) + R`` for
    ``|x0| <= M0``, ``|e_i| <= E0`` and periods in ``(0, T_bound)``."""

    beta: KLFn
    T_bound: float
    gamma: ComparisonFn | None = None
    R: float = 0.0
    M0: float = 1.0
    E0: float = 0.0
    config: dict | None = None

    def __post_init__(self):
        if not self.T_bound > 0 or self.R < 0 or self.M0 < 0 or self.E0 < 0:
            raise ConfigError("envelope claim needs T_bound > 0 and nonnegative R, M0, E0")


@dataclass(frozen=True)
class Decrease:
    """Claim ``V(Fbar(x,e,T)) - V(x) <= -T alpha3(|x|)`` on the candidate's region."""

    candidate: LyapunovCandidate
    T_bound: float
    mode: Mode = Mode.SISSVSR
    config: dict | None = None

    def __post_init__(self):
        if not self.T_bound > 0:
            raise ConfigError("decrease claim needs T_bound > 0")


@dataclass(frozen=True)
class Budget:
    restarts: int = 1000
    iterations: int = 30
    horizon: int = 100
    seed: int = 0
    climbers: int = 4
    blocks: int = 8

    def __post_init__(self):
        if min(self.restarts, self.horizon, self.climbers, self.blocks) < 1 or self.iterations < 0:
            raise ConfigError("budget entries must be positive")


@dataclass(frozen=True)
class FalsificationProblem:
    model: ClosedLoopModel
    claim: Envelope | Decrease
    budget: Budget = field(default_factory=Budget)


@dataclass
class Witness:
    x0: np.ndarray
    periods: np.ndarray
    errors: np.ndarray
    claim: dict
    k: int
    lhs: float
    rhs: float
    scenarios_evaluated: int = 0
    phase: str = "random"

    @property
    def found(self):
        return True

    def to_dict(self):
        return {
            "x0": [float(v) for v in self.x0],
            "periods": [float(v) for v in self.periods],
            "errors": [[float(v) for v in row] for row in self.errors],
            "claim": self.claim,
            "violation": {"k": int(self.k), "lhs": float(self.lhs), "rhs": float(self.rhs)},
            "scenarios_evaluated": self.scenarios_evaluated,
            "phase": self.phase,
        }


@dataclass
class NoCounterexampleFound:
    """Search finished without a violation.  ``closeness`` is the largest
    lhs/rhs ratio seen (envelopes) or the largest margin deficit (decrease)."""

    closeness: float
    best_score: float
    scenarios_evaluated: int
    claim: dict

    @property
    def found(self):
        return False

    def to_dict(self):
        return {"result": "NoCounterexampleFound", "closeness": _num(self.closeness),
                "best_score": _num(self.best_score), "scenarios_evaluated": self.scenarios_evaluated,
                "claim": self.claim}


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def _claim_dict(claim):
    if claim.config is not None:
        return claim.config
    if isinstance(claim, Envelope):
        return {"type": "envelope", "beta": claim.beta.describe(),
                "gamma": claim.gamma.describe() if claim.gamma is not None else None,
                "R": claim.R, "M0": claim.M0, "E0": claim.E0, "T_bound": claim.T_bound}
    return {"type": "decrease", "V": claim.candidate.name, "mode": claim.mode.value, "T_bound": claim.T_bound}


# ---------------------------------------------------------------- claims from config

def claim_from_config(cfg: dict, model: ClosedLoopModel) -> Envelope | Decrease:
    """Build a claim from a JSON-style mapping.

    Envelope: either ``beta`` (expression in s, t) with optional ``gamma``
    (expression in s), or certificate functions ``alpha1..3`` (and ``rho``
    when ``E0 > 0``) from which beta and gamma are constructed.  Decrease:
    the fields of a Lyapunov candidate plus ``mode``.
    """
    kind = cfg.get("type", "envelope")
    try:
        T_bound = float(cfg["T_bound"])
        if kind == "decrease":
            cand = candidate_from_config(cfg, model.n)
            return Decrease(cand, T_bound, Mode(cfg.get("mode", "siss")), config=dict(cfg))
        if kind != "envelope":
            raise ConfigError(f"unknown claim type {kind!r}")
        M0 = float(cfg.get("M0", 1.0))
        E0 = float(cfg.get("E0", 0.0))
        R = float(cfg.get("R", 0.0))
        if "beta" in cfg:
            beta = ExprKL(cfg["beta"])
            gamma = ExprFn(cfg["gamma"]) if cfg.get("gamma") else None
            return Envelope(beta, T_bound, gamma, R, M0, E0, config=dict(cfg))
        env = envelope_from_certificate(model, comparison_fn(cfg["alpha1"]), comparison_fn(cfg["alpha2"]),
                                        comparison_fn(cfg["alpha3"]),
                                        comparison_fn(cfg["rho"]) if cfg.get("rho") else None,
                                        M0, E0, T_bound, R)
        out = dict(cfg)
        out["M_inflated"] = env.config["M_inflated"]
        return Envelope(env.beta, T_bound, env.gamma, R, M0, E0, config=out)
    except KeyError as exc:
        raise ConfigError(f"claim is missing field {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def envelope_from_certificate(model, alpha1, alpha2, alpha3, rho, M0, E0, T_bound, R=0.0,
                              s_points: int = 33) -> Envelope:
    """Envelope claim built from certificate functions.

    Without errors the robust-stability beta is used; with ``E0 > 0`` the
    input-to-state pair (beta with factor 2, gamma through eta).
    """
    if E0 > 0:
        if rho is None:
            raise ConfigError("an envelope with E0 > 0 needs rho")
        se = sigma_eta_estimate(model, rho, np.linspace(0.0, E0, s_points), T_bound)
        beta = beta_from_certificate(alpha1, alpha2, alpha3, scale=2.0)
        gamma = gamma_from_certificate(alpha1, alpha2, se.eta)
        M = inflate_M(alpha1, alpha2, M0, E0, se.eta)
    else:
        beta = beta_from_certificate(alpha1, alpha2, alpha3)
        gamma = None
        M = inflate_M(alpha1, alpha2, M0)
    cfg = {"type": "envelope", "M0": M0, "E0": E0, "R": R, "T_bound": T_bound, "M_inflated": M}
    return Envelope(beta, T_bound, gamma, R, M0, E0, config=cfg)


# ---------------------------------------------------------------- search helpers

def _clip_ball(v, radius):
    nrm = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.where(nrm > radius, radius / np.maximum(nrm, 1e-300), 1.0)
    return v * scale


def _clip_T(P, T_bound):
    return np.clip(P, T_bound * OPEN_EPS, T_bound * (1 - OPEN_EPS))


def _restart_batch(problem, start, count):
    """Scenarios ``start .. start+count-1``, each from its own stream."""
    claim, b, n, q = problem.claim, problem.budget, problem.model.n, problem.model.q
    K = b.horizon
    x0 = np.empty((count, n))
    P = np.empty((count, K))
    E = np.zeros((count, K, q))
    for j in range(count):
        rng = scenario_rng(b.seed, start + j, _STREAM_SEARCH)
        if rng.uniform() < 0.5:
            x0[j] = sample_sphere(rng, claim.M0, n, 1)[0]
        else:
            x0[j] = sample_ball(rng, claim.M0, n, 1)[0]
        if rng.uniform() < 0.5:
            P[j] = claim.T_bound * (1 - 10 ** rng.uniform(-6, -1))
        else:
            P[j] = rng.uniform(0.0, claim.T_bound, K)
        if claim.E0 > 0 and rng.uniform() < 0.75:
            E[j] = sample_sphere(rng, claim.E0, q, K)
    return x0, _clip_T(P, claim.T_bound), E


def _envelope_scores(ens: Ensemble, claim: Envelope):
    """Per scenario: max_k (lhs - rhs) with the check tolerance, the same
    over k >= 1 (the climbing signal; k = 0 is flat for any beta with
    beta(s, 0) >= s), and the max ratio."""
    lhs = ens.norms
    rhs = envelope_rhs(ens, claim.beta, claim.gamma, claim.R)
    with np.errstate(invalid="ignore"):
        diff = np.where(np.isnan(lhs), -np.inf, lhs - rhs * (1 + ENVELOPE_RTOL))
        ratio = np.where(np.isnan(lhs) | (rhs <= 0), 0.0, lhs / np.where(rhs > 0, rhs, 1.0))
    diff = np.where(ens.diverged_at[:, None] >= 0, np.where(np.isnan(lhs), -np.inf, diff), diff)
    escaped = ens.diverged_at >= 0
    score = np.where(escaped, np.inf, diff.max(axis=1))
    climb = diff[:, 1:].max(axis=1) if diff.shape[1] > 1 else score
    climb = np.where(escaped, np.inf, climb)
    return score, climb, np.where(escaped, np.inf, ratio.max(axis=1))


def _best(scores, offset=0):
    """Index of the largest score; ties go to the smaller index."""
    top = np.max(scores)
    return int(np.flatnonzero(scores == top)[0]) + offset


def _replay_envelope(problem, x0, P, E):
    ens = simulate_batch(problem.model, x0[None], P[None], E[None])
    rep = envelope_check(ens, problem.claim.beta, problem.claim.gamma, problem.claim.R, rtol=ENVELOPE_RTOL)
    if not rep.violations:
        return None
    v = rep.violations[0]
    return v.k, v.lhs, v.rhs


def _neighbours(x0, P, E, claim, step, blocks):
    """Coordinate moves: each x0 axis, and each block of periods / errors, up and down."""
    n = x0.shape[0]
    K = P.shape[0]
    xs, ps, es = [], [], []
    for i in range(n):
        for sgn in (1.0, -1.0):
            y = x0.copy()
            y[i] += sgn * step * max(claim.M0, 1e-12)
            xs.append(_clip_ball(y, claim.M0))
            ps.append(P)
            es.append(E)
    edges = np.linspace(0, K, min(blocks, K) + 1).astype(int)
    for lo, hi in zip(edges[:-1], edges[1:]):
        for sgn in (1.0, -1.0):
            Q = P.copy()
            Q[lo:hi] += sgn * step * claim.T_bound
            xs.append(x0)
            ps.append(_clip_T(Q, claim.T_bound))
            es.append(E)
        if claim.E0 > 0:
            for d in range(E.shape[1]):
                for sgn in (1.0, -1.0):
                    F = E.copy()
                    F[lo:hi, d] += sgn * step * claim.E0
                    xs.append(x0)
                    ps.append(P)
                    es.append(_clip_ball(F, claim.E0))
    return np.array(xs), np.array(ps), np.array(es)


def _falsify_envelope(problem: FalsificationProblem, workers: int):
    claim, b = problem.claim, problem.budget
    cdict = _claim_dict(claim)
    evaluated = 0
    best_ratio = 0.0
    pool = []  # (score, index, x0, P, E)
    batch = 2048
    for start in range(0, b.restarts, batch):
        count = min(batch, b.restarts - start)
        x0, P, E = _restart_batch(problem, start, count)
        ens = simulate_batch(problem.model, x0, P, E, workers=workers)
        scores, climb, ratios = _envelope_scores(ens, claim)
        evaluated += count
        best_ratio = max(best_ratio, float(ratios.max()))
        hits = np.flatnonzero(scores > 0)
        for i in hits:
            v = _replay_envelope(problem, x0[i], P[i], E[i])
            if v is not None:
                return Witness(x0[i], P[i], E[i], cdict, *v, scenarios_evaluated=start + int(i) + 1)
        order = np.lexsort((np.arange(count), -climb))[: b.climbers]
        pool.extend((float(climb[i]), start + int(i), x0[i], P[i], E[i]) for i in order)
        pool = sorted(pool, key=lambda r: (-r[0], r[1]))[: b.climbers]

    best_score = pool[0][0] if pool else -math.inf
    for _, _, x0, P, E in pool:
        cur = (x0.copy(), P.copy(), E.copy())
        cur_score = None
        step = 0.25
        for _ in range(b.iterations):
            X, Ps, Es = _neighbours(*cur, claim, step, b.blocks)
            ens = simulate_batch(problem.model, X, Ps, Es, workers=workers)
            scores, climb, ratios = _envelope_scores(ens, claim)
            evaluated += len(X)
            best_ratio = max(best_ratio, float(ratios.max()))
            for j in np.flatnonzero(scores > 0):
                v = _replay_envelope(problem, X[j], Ps[j], Es[j])
                if v is not None:
                    return Witness(X[j], Ps[j], Es[j], cdict, *v, scenarios_evaluated=evaluated, phase="climb")
            j = _best(climb)
            if cur_score is None or climb[j] > cur_score:
                cur, cur_score = (X[j], Ps[j], Es[j]), float(climb[j])
                best_score = max(best_score, cur_score)
            else:
                step *= 0.5
    return NoCounterexampleFound(best_ratio, best_score, evaluated, cdict)


def _decrease_points(problem, start, count):
    cand, claim = problem.claim.candidate, problem.claim
    n, q = problem.model.n, problem.model.q
    X = np.empty((count, n))
    Ev = np.zeros((count, q))
    T = np.empty(count)
    for j in range(count):
        rng = scenario_rng(problem.budget.seed, start + j, _STREAM_SEARCH)
        X[j] = (sample_sphere if rng.uniform() < 0.5 else sample_ball)(rng, cand.M, n, 1)[0]
        if cand.E > 0:
            Ev[j] = (sample_sphere if rng.uniform() < 0.5 else sample_ball)(rng, cand.E, q, 1)[0]
        T[j] = claim.T_bound * (1 - 10 ** rng.uniform(-6, 0))
    return _project_region(problem, X, Ev, _clip_T(T, claim.T_bound))


def _project_region(problem, X, Ev, T):
    """Clip into the region; in S-ISS mode shrink e until rho(|e|) <= |x|."""
    cand = problem.claim.candidate
    X = _clip_ball(X, cand.M)
    Ev = _clip_ball(Ev, cand.E)
    if problem.claim.mode is Mode.SISSVSR and cand.rho is not None:
        rx = np.linalg.norm(X, axis=1)
        re = np.linalg.norm(Ev, axis=1)
        lim = cand.rho.inverse(rx)
        lim = np.atleast_1d(lim) * (1 - 1e-12)
        Ev = np.where((cand.rho(re) > rx)[:, None], Ev * (lim / np.maximum(re, 1e-300))[:, None], Ev)
    return X, Ev, T


def _margins(problem, X, Ev, T):
    try:
        m = decrease_margin(problem.model, problem.claim.candidate, X, Ev, T)
    except FiniteEscape:
        m = np.array([_margins(problem, X[i:i + 1], Ev[i:i + 1], T[i:i + 1])[0] for i in range(len(X))])
        return m
    return np.where(np.isnan(m), -np.inf, m)


def _decrease_witness(problem, x, e, T, cdict, evaluated, phase):
    m = _margins(problem, x[None], e[None], np.array([T]))[0]
    if not m < 0:
        return None
    cand = problem.claim.candidate
    vx = float(cand.V(x[None])[0])
    with np.errstate(over="ignore", invalid="ignore"):
        lhs = float(cand.V(problem.model(x[None], e[None], np.array([T])))[0]) - vx
    rhs = -T * float(cand.alpha3(float(np.linalg.norm(x))))
    return Witness(x, np.array([T]), e[None], cdict, 0, lhs, rhs, scenarios_evaluated=evaluated, phase=phase)


def _falsify_decrease(problem: FalsificationProblem, workers: int):
    claim, b, cand = problem.claim, problem.budget, problem.claim.candidate
    cdict = _claim_dict(claim)
    X, Ev, T = _decrease_points(problem, 0, b.restarts)
    m = _margins(problem, X, Ev, T)
    evaluated = len(X)
    order = np.lexsort((np.arange(len(m)), m))
    for i in order:
        if not m[i] < 0:
            break
        w = _decrease_witness(problem, X[i], Ev[i], float(T[i]), cdict, int(i) + 1, "random")
        if w is not None:
            return w
    best = float(-m[order[0]])
    n, q = problem.model.n, problem.model.q
    for i in order[: b.climbers]:
        cur = (X[i].copy(), Ev[i].copy(), float(T[i]))
        cur_m = float(m[i])
        step = 0.25
        for _ in range(b.iterations):
            cx, ce, cT = [], [], []
            for d in range(n):
                for sgn in (1.0, -1.0):
                    y = cur[0].copy()
                    y[d] += sgn * step * max(cand.M, 1e-12)
                    cx.append(y), ce.append(cur[1]), cT.append(cur[2])
            for d in range(q):
                for sgn in (1.0, -1.0):
                    f = cur[1].copy()
                    f[d] += sgn * step * max(cand.E, 1e-12)
                    cx.append(cur[0]), ce.append(f), cT.append(cur[2])
            for sgn in (1.0, -1.0):
                cx.append(cur[0]), ce.append(cur[1]), cT.append(cur[2] + sgn * step * claim.T_bound)
            Xc, Ec, Tc = _project_region(problem, np.array(cx), np.array(ce), _clip_T(np.array(cT), claim.T_bound))
            mc = _margins(problem, Xc, Ec, Tc)
            evaluated += len(Xc)
            j = _best(-mc)
            if mc[j] < 0:
                w = _decrease_witness(problem, Xc[j], Ec[j], float(Tc[j]), cdict, evaluated, "climb")
                if w is not None:
                    return w
            if mc[j] < cur_m:
                cur, cur_m = (Xc[j], Ec[j], float(Tc[j])), float(mc[j])
                best = max(best, -cur_m)
            else:
                step *= 0.5
    return NoCounterexampleFound(best, best, evaluated, cdict)


def falsify(problem: FalsificationProblem, workers: int = 1) -> Witness | NoCounterexampleFound:
    """Search for a scenario violating ``problem.claim``.

    Deterministic for a fixed seed; ``workers`` only affects speed.
    """
    if isinstance(problem.claim, Decrease):
        return _falsify_decrease(problem, workers)
    return _falsify_envelope(problem, workers)


def replay_witness(model: ClosedLoopModel, witness: dict, claim: Envelope | Decrease | None = None):
    """Re-simulate a serialized witness; returns ``(trajectory ensemble, violation or None)``."""
    x0 = np.asarray(witness["x0"], dtype=float)
    P = np.asarray(witness["periods"], dtype=float)
    E = np.asarray(witness["errors"], dtype=float).reshape(len(P), model.q)
    ens = simulate_batch(model, x0[None], P[None], E[None])
    if claim is None:
        return ens, None
    if isinstance(claim, Decrease):
        m = decrease_margin(model, claim.candidate, x0[None], E[:1], P[:1])[0]
        return ens, (0, float(m)) if m < 0 else None
    rep = envelope_check(ens, claim.beta, claim.gamma, claim.R, rtol=ENVELOPE_RTOL)
    if not rep.violations:
        return ens, None
    v = rep.violations[0]
    return ens, (v.k, v.lhs, v.rhs)
