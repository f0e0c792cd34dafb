"""Sampling-period and error sequences, and closed-loop simulation.

Random sequences use counter-based seeding: scenario ``i`` of a run with seed
``s`` always draws from ``SeedSequence(s, spawn_key=(i, stream))``, so its
sequence does not depend on how scenarios are batched or on worker count.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FiniteEscape, InvalidSpec
from .models import ESCAPE_CAP, ClosedLoopModel

# random periods are drawn from [T*OPEN_EPS, T*(1-OPEN_EPS)] to stay inside (0, T)
OPEN_EPS = 1e-9
# fixed partition for batched simulation; keeps results independent of workers
CHUNK = 512

_STREAM_PERIODS = 0
_STREAM_ERRORS = 1
_STREAM_X0 = 2


def scenario_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index), int(stream))))


@dataclass(frozen=True)
class SamplingSpec:
    """Sampling-period sequence in Phi(T_max).

    ``mode`` is ``constant`` (every period ``theta * T_max``), ``uniform``
    (i.i.d. uniform on the open interval) or ``explicit`` (``values``).
    """

    mode: str
    T_max: float
    length: int = 1
    theta: float = 0.5
    values: tuple | None = None
    seed: int = 0


@dataclass(frozen=True)
class ErrorSpec:
    """Bounded error (or disturbance) sequence with ``|e_i| <= bound``.

    Modes: ``zero``, ``constant`` (``vector``), ``ball`` (i.i.d. uniform in the
    ball), ``sphere`` (i.i.d. uniform on the sphere of radius ``bound``) and
    ``list`` (explicit ``values``, validated).
    """

    mode: str
    bound: float = 0.0
    dim: int = 1
    length: int = 1
    vector: tuple | None = None
    values: tuple | None = None
    seed: int = 0


def gen_sampling(spec: SamplingSpec, index: int = 0) -> np.ndarray:
    T = float(spec.T_max)
    if not T > 0 or spec.length < 1:
        raise InvalidSpec("need T_max > 0 and length >= 1")
    if spec.mode == "constant":
        if not 0 < spec.theta < 1:
            raise InvalidSpec(f"theta={spec.theta} not in (0, 1)")
        return np.full(spec.length, spec.theta * T)
    if spec.mode == "uniform":
        rng = scenario_rng(spec.seed, index, _STREAM_PERIODS)
        return rng.uniform(T * OPEN_EPS, T * (1 - OPEN_EPS), size=spec.length)
    if spec.mode == "explicit":
        vals = np.asarray(spec.values, dtype=float)
        if vals.ndim != 1 or len(vals) == 0:
            raise InvalidSpec("explicit periods must be a non-empty list")
        if np.any(vals <= 0) or np.any(vals >= T):
            raise InvalidSpec(f"explicit periods must lie in (0, {T:g})")
        return vals.copy()
    raise InvalidSpec(f"unknown sampling mode {spec.mode!r}")


def sample_ball(rng: np.random.Generator, radius: float, dim: int, size: int) -> np.ndarray:
    """Uniform samples in the closed Euclidean ball."""
    d = rng.standard_normal((size, dim))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    r = radius * rng.uniform(0.0, 1.0, size=(size, 1)) ** (1.0 / dim)
    return d * r


def sample_sphere(rng: np.random.Generator, radius: float, dim: int, size: int) -> np.ndarray:
    d = rng.standard_normal((size, dim))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    return radius * d


def gen_errors(spec: ErrorSpec, index: int = 0) -> np.ndarray:
    if spec.bound < 0 or spec.dim < 1 or spec.length < 1:
        raise InvalidSpec("need bound >= 0, dim >= 1, length >= 1")
    K, q, E = spec.length, spec.dim, float(spec.bound)
    if spec.mode == "zero":
        return np.zeros((K, q))
    if spec.mode == "constant":
        v = np.asarray(spec.vector if spec.vector is not None else [E] + [0.0] * (q - 1), dtype=float)
        if v.shape != (q,) or np.linalg.norm(v) > E * (1 + 1e-12):
            raise InvalidSpec("constant error vector has wrong shape or exceeds the bound")
        return np.tile(v, (K, 1))
    if spec.mode in ("ball", "sphere"):
        rng = scenario_rng(spec.seed, index, _STREAM_ERRORS)
        draw = sample_ball if spec.mode == "ball" else sample_sphere
        out = draw(rng, E, q, K)
        # guard against rounding just outside the ball
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return np.where(norms > E, out * (E / np.maximum(norms, 1e-300)), out)
    if spec.mode == "list":
        vals = np.asarray(spec.values, dtype=float).reshape(-1, q)
        if np.any(np.linalg.norm(vals, axis=1) > E * (1 + 1e-12)):
            raise InvalidSpec("listed errors exceed the bound")
        return vals
    raise InvalidSpec(f"unknown error mode {spec.mode!r}")


def elapsed_times(periods) -> np.ndarray:
    """``elapsed[k] = sum_{i<k} T_i`` with compensated summation; elapsed[0] = 0."""
    periods = np.asarray(periods, dtype=float)
    out = np.zeros(periods.shape[:-1] + (periods.shape[-1] + 1,))
    total = np.zeros(periods.shape[:-1])
    comp = np.zeros(periods.shape[:-1])
    for k in range(periods.shape[-1]):
        y = periods[..., k] - comp
        t = total + y
        comp = (t - total) - y
        total = t
        out[..., k + 1] = total
    return out


@dataclass
class Trajectory:
    states: np.ndarray
    periods: np.ndarray
    errors: np.ndarray
    elapsed: np.ndarray
    diverged_at: int | None = None
    reason: str = ""

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=-1)

    def to_csv(self) -> str:
        n = self.states.shape[1]
        q = self.errors.shape[1]
        buf = io.StringIO()
        cols = ["k", "t"] + [f"x{i + 1}" for i in range(n)] + [f"e{i + 1}" for i in range(q)] + ["T"]
        buf.write(",".join(cols) + "\n")
        for k in range(len(self.states)):
            row = [str(k), repr(float(self.elapsed[k]))]
            row += [repr(float(v)) for v in self.states[k]]
            if k < len(self.periods):
                row += [repr(float(v)) for v in self.errors[k]] + [repr(float(self.periods[k]))]
            else:
                row += [""] * (q + 1)
            buf.write(",".join(row) + "\n")
        if self.diverged:
            buf.write(f"# diverged_at={self.diverged_at}\n")
        return buf.getvalue()


def _bad(x, cap):
    norms = np.linalg.norm(x, axis=-1)
    return ~np.isfinite(norms) | (norms > cap)


def _step_rows(model, x, e, T):
    """Step a batch; if the batch raises FiniteEscape retry row by row."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return model(x, e, T)
    except FiniteEscape:
        out = np.empty_like(x)
        for i in range(len(x)):
            try:
                out[i] = model(x[i:i + 1], e[i:i + 1], T[i:i + 1])[0]
            except FiniteEscape:
                out[i] = np.inf
        return out


def simulate(model: ClosedLoopModel, x0, periods, errors, cap: float = ESCAPE_CAP) -> Trajectory:
    """Iterate ``x_{k+1} = Fbar(x_k, e_k, T_k)``.

    Divergence (non-finite state, escape, or norm above ``cap``) truncates the
    trajectory and is recorded in ``diverged_at``; it is not an error.  A
    finite state above the cap is kept as the last state.
    """
    ens = simulate_batch(model, np.asarray(x0, dtype=float).reshape(1, -1),
                         np.asarray(periods, dtype=float)[None],
                         np.asarray(errors, dtype=float).reshape(1, len(periods), -1), cap=cap)
    return ens.trajectory(0)


@dataclass
class Ensemble:
    """Batch of trajectories. States after divergence are NaN."""

    states: np.ndarray  # (N, K+1, n)
    periods: np.ndarray  # (N, K)
    errors: np.ndarray  # (N, K, q)
    elapsed: np.ndarray  # (N, K+1)
    diverged_at: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))  # -1 if none

    def __len__(self):
        return self.states.shape[0]

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=-1)

    def trajectory(self, i: int) -> Trajectory:
        d = int(self.diverged_at[i])
        if d < 0:
            return Trajectory(self.states[i].copy(), self.periods[i].copy(), self.errors[i].copy(),
                              self.elapsed[i].copy())
        last = d + 1 if np.all(np.isfinite(self.states[i, d])) else d
        return Trajectory(self.states[i, :last].copy(), self.periods[i].copy(), self.errors[i].copy(),
                          self.elapsed[i].copy(), diverged_at=d, reason="escape")


def _simulate_chunk(model, x0, periods, errors, cap):
    N, K = periods.shape
    n = x0.shape[1]
    states = np.full((N, K + 1, n), np.nan)
    states[:, 0] = x0
    diverged = np.full(N, -1, dtype=int)
    bad0 = _bad(x0, cap)
    diverged[bad0] = 0
    alive = ~bad0
    for k in range(K):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        nxt = _step_rows(model, states[idx, k], errors[idx, k], periods[idx, k])
        states[idx, k + 1] = nxt
        bad = _bad(nxt, cap)
        if np.any(bad):
            hit = idx[bad]
            diverged[hit] = k + 1
            alive[hit] = False
    return states, diverged


def simulate_batch(model: ClosedLoopModel, x0, periods, errors, cap: float = ESCAPE_CAP,
                   workers: int = 1) -> Ensemble:
    """Simulate N scenarios; rows are processed in fixed chunks of CHUNK rows."""
    x0 = np.asarray(x0, dtype=float)
    periods = np.asarray(periods, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if errors.ndim == 2:
        errors = errors[..., None]
    if x0.ndim != 2 or periods.ndim != 2 or errors.ndim != 3:
        raise ValueError("expected x0 (N, n), periods (N, K), errors (N, K, q)")
    if periods.shape != errors.shape[:2] or x0.shape[0] != periods.shape[0]:
        raise ValueError("periods and errors must have matching lengths")
    if x0.shape[1] != model.n or errors.shape[2] != model.q:
        raise ValueError("dimensions do not match the model")
    N = x0.shape[0]
    bounds = [(i, min(i + CHUNK, N)) for i in range(0, N, CHUNK)]

    def run(b):
        lo, hi = b
        return _simulate_chunk(model, x0[lo:hi], periods[lo:hi], errors[lo:hi], cap)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    states = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, periods.shape[1] + 1, model.n))
    diverged = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, dtype=int)
    return Ensemble(states, periods, errors, elapsed_times(periods), diverged)


@dataclass(frozen=True)
class ScenarioSpec:
    """Random scenario family: x0 uniform in a ball, periods and errors per spec."""

    count: int
    x0_radius: float
    n: int
    sampling: SamplingSpec
    errors: ErrorSpec
    seed: int = 0
    x0_mode: str = "ball"  # or "sphere"


def make_scenarios(spec: ScenarioSpec, start: int = 0):
    """Return ``(x0, periods, errors)`` arrays for scenarios ``start .. start+count-1``."""
    x0 = np.empty((spec.count, spec.n))
    periods = np.empty((spec.count, spec.sampling.length))
    errs = np.empty((spec.count, spec.errors.length, spec.errors.dim))
    samp = spec.sampling if spec.sampling.seed == spec.seed else _reseed(spec.sampling, spec.seed)
    espec = spec.errors if spec.errors.seed == spec.seed else _reseed(spec.errors, spec.seed)
    for j in range(spec.count):
        i = start + j
        rng = scenario_rng(spec.seed, i, _STREAM_X0)
        if spec.x0_mode == "sphere":
            x0[j] = sample_sphere(rng, spec.x0_radius, spec.n, 1)[0]
        else:
            x0[j] = sample_ball(rng, spec.x0_radius, spec.n, 1)[0]
        periods[j] = gen_sampling(samp, i)
        errs[j] = gen_errors(espec, i)
    return x0, periods, errs


def _reseed(spec, seed):
    return replace(spec, seed=seed)


__all__ = [
    "SamplingSpec", "ErrorSpec", "Trajectory", "Ensemble", "ScenarioSpec", "gen_sampling",
    "gen_errors", "simulate", "simulate_batch", "make_scenarios", "elapsed_times",
    "scenario_rng", "sample_ball", "sample_sphere", "OPEN_EPS",
]
