"""One test per acceptance criterion; each records a PASS/FAIL line."""

import json
import math
import os
import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import record_acceptance
from vsrstab.bounds import (
    beta_from_certificate,
    comparison_ode,
    converse_lyapunov_estimate,
    envelope_check,
    inflate_M,
    tbar_threshold,
)
from vsrstab.certifier import (
    DecreaseGrid,
    LyapunovCandidate,
    Mode,
    certify_decrease,
    check_structural,
    decrease_margin,
    lyapunov_function,
)
from vsrstab.cli import run
from vsrstab.comparison import ComposedFn, ExprFn, InverseFn, MaxFn, ScaledFn, TableFn
from vsrstab.example import example_closed_loop, example_composed, example_model, example_ttilde, verify_example
from vsrstab.falsifier import Budget, Envelope, FalsificationProblem, envelope_from_certificate, falsify
from vsrstab.models import DiscreteStepMap, Method, VectorField, discretize_step, existence_horizon, parse_model
from vsrstab.comparison import ExprKL
from vsrstab.errors import FiniteEscape
from vsrstab.trajectory import ErrorSpec, SamplingSpec, ScenarioSpec, make_scenarios, simulate_batch

pytestmark = pytest.mark.acceptance

SQ = ExprFn("pow(s,2)")
A3 = ExprFn("3*pow(s,4)+pow(s,2)")
RHO = ExprFn("s/0.025")
PROPERTY_CASES = 1000


def exact_coeffs(K):
    K = Fraction(K)
    a = 9 * K**6 + 135 * K**4 + 174 * K**3 + 117 * K**2 + 90 * K + 4
    b = 6 * K**4 + 24 * K**3 + 36 * K**2 + 22 * K + 4
    c = K**2 + 2 * K + 1
    d = (6 * K**2 + 18) * K
    return a, b, c, d


def test_1_certificate_reproduction(tmp_path):
    t0 = time.perf_counter()
    code = run(["example", "--M", "1", "--K", "0.025", "--seed", "0", "--workers", "1", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    rep = json.loads((tmp_path / "example.json").read_text())
    a, b, c, d = exact_coeffs(Fraction(1, 40))
    got = rep["coefficients"]
    coeff_ok = all(abs(got[k] - float(v)) <= 1e-9 * float(v) for k, v in zip("abcd", (a, b, c, d)))
    coeff_ok &= abs(got["a"] - 6.3258965) < 5e-8 and abs(got["b"] - 4.5728773) < 5e-8
    coeff_ok &= got["c"] == 1.050625 and got["d"] == 0.45009375
    T_exact = min(1 / (2 * b), 1 / (2 * (a + c)))
    tt_ok = abs(rep["Ttilde"] - float(T_exact)) <= 1e-6 * float(T_exact) and round(rep["Ttilde"], 6) == 0.067783
    cert = rep["certification"]
    cert_ok = cert["verdict"] == "CertifiedOnGrid" and cert["min_margin"] >= 0
    grid_ok = (cert["grid"]["x_points"], cert["grid"]["e_points_per_x"], cert["grid"]["T_points"]) == (2001, 101, 64)
    ok = code == 0 and coeff_ok and tt_ok and cert_ok and grid_ok and elapsed < 10
    detail = (f"a,b,c,d ok={coeff_ok}; Ttilde={rep['Ttilde']:.9f}; verdict={cert['verdict']} "
              f"min_margin={cert['min_margin']}; runtime={elapsed:.2f}s")
    assert record_acceptance(1, ok, detail)


def test_2_cross_model_identity():
    rng = np.random.default_rng(2)
    N = 100_000
    t0 = time.perf_counter()
    x = rng.uniform(-1, 1, N)
    e = rng.uniform(-0.1, 0.1, N)
    T = rng.uniform(0, 0.0678, N)
    comp = example_composed("euler")(x[:, None], e[:, None], T)[:, 0]
    direct = example_model(x, e, T)
    err = float(np.max(np.abs(comp - direct)))
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-14 and elapsed < 1.0
    assert record_acceptance(2, ok, f"max |diff| = {err:.3e} over 1e5 points; runtime={elapsed:.3f}s")


def test_3_envelope_soundness():
    t0 = time.perf_counter()
    M0, T_bound = 1.0, 0.06
    M = inflate_M(SQ, SQ, M0)  # no errors: max(M0, eta(0)) = M0
    # the certificate has to hold on the inflated domain for the chosen period bound
    cert = verify_example(M, 0.025, x_points=401, e_points=21, T_points=32, cross_check=False)
    domain_ok = example_ttilde(M) >= T_bound and cert.min_margin >= 0
    beta = beta_from_certificate(SQ, SQ, A3)
    spec = ScenarioSpec(1000, M0, 1, SamplingSpec("uniform", T_bound, 200), ErrorSpec("zero", 0.0, 1, 200), seed=3)
    ens = simulate_batch(example_closed_loop(), *make_scenarios(spec))
    rep = envelope_check(ens, beta)
    elapsed = time.perf_counter() - t0
    ok = domain_ok and rep.ok and rep.checked_points == 1000 * 201 and elapsed < 30
    assert record_acceptance(3, ok, f"M={M:g}; violations={len(rep.violations)} of {rep.checked_points} points; "
                                    f"max lhs/rhs={rep.max_ratio:.6f}; runtime={elapsed:.2f}s")


def test_4_falsifier_sanity():
    t0 = time.perf_counter()
    loop = example_closed_loop()
    a = falsify(FalsificationProblem(parse_model("growth"), Envelope(ExprKL("2*s*exp(-t)"), 0.1),
                                     Budget(restarts=1, iterations=0)))
    env_big = envelope_from_certificate(loop, SQ, SQ, A3, RHO, 1.0, 0.025, 2.0)
    b = falsify(FalsificationProblem(loop, env_big, Budget()))
    env = envelope_from_certificate(loop, SQ, SQ, A3, RHO, 1.0, 0.025, 0.06)
    c = falsify(FalsificationProblem(loop, env, Budget(restarts=10_000)))
    elapsed = time.perf_counter() - t0
    ok = a.found and a.scenarios_evaluated == 1 and b.found and not c.found and c.scenarios_evaluated >= 10_000
    ok = ok and elapsed < 60
    assert record_acceptance(4, ok, f"(a) found={a.found} after {a.scenarios_evaluated} restart; (b) found={b.found}; "
                                    f"(c) found={c.found} after {c.scenarios_evaluated} scenarios, "
                                    f"closeness={c.closeness:.4f}; runtime={elapsed:.2f}s")


def test_5_comparison_ode():
    lin = ExprFn("s")
    s_grid = np.linspace(0.1, 5, 10)
    t_grid = np.linspace(0, 4, 10)
    err = max(abs(comparison_ode(lin, s, t) - s * math.exp(-t)) for s in s_grid for t in t_grid)
    semi = 0.0
    for alpha in (lin, ExprFn("3*pow(s,2)+s")):
        for s in s_grid:
            for t1, t2 in [(0.3, 0.7), (1.0, 2.5), (0.05, 3.0)]:
                semi = max(semi, abs(comparison_ode(alpha, comparison_ode(alpha, s, t1), t2)
                                     - comparison_ode(alpha, s, t1 + t2)))
    ok = err <= 1e-8 and semi <= 1e-7
    assert record_acceptance(5, ok, f"max |y - s e^-t| = {err:.2e}; semigroup defect = {semi:.2e}")


def test_6_tbar():
    f = lambda T: 1 - math.exp(-2 * T) - T  # noqa: E731
    lo, hi = 0.5, 1.0
    while hi - lo > 1e-13:
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if f(mid) > 0 else (lo, mid)
    got = tbar_threshold()
    ok = abs(got - lo) <= 1e-6 and abs(got - 0.796812) <= 1e-6
    assert record_acceptance(6, ok, f"tbar={got:.9f}; oracle={lo:.9f}")


def test_7_existence_horizon():
    f = VectorField.from_exprs(["x^3+u"])
    h = existence_horizon(f, [-1, 1], [-4, 4], safety=1.0)
    rel = abs(h.Tstar - 1 / 12) * 12
    rng = np.random.default_rng(7)
    step = DiscreteStepMap(Method.TIGHT, f)
    escapes = 0
    for _ in range(20):
        x0 = rng.uniform(-1, 1)
        u = rng.uniform(-4, 4)
        try:
            out = discretize_step(step, [x0], [u], 0.99 * h.Tstar)
            escapes += not np.all(np.isfinite(out))
        except FiniteEscape:
            escapes += 1
    ok = rel <= 0.02 and escapes == 0
    assert record_acceptance(7, ok, f"T*={h.Tstar:.6f} (rel err {rel:.1e} vs 1/12); escapes in 20 probes: {escapes}")


def test_8_structural():
    rep = check_structural(example_closed_loop(), 0.06, [0.001, 0.01, 0.05, 0.1, 0.5, 1.0],
                           [0.25, 0.5, 1.0, 2.0], [0.0, 0.01, 0.025, 0.1])
    d = [v if v is not None else 0.0 for v in rep.delta_table]
    C = np.array(rep.C_table)
    delta_ok = all(b >= a for a, b in zip(d, d[1:]))
    C_ok = bool(np.all(np.diff(C, axis=0) >= 0) and np.all(np.diff(C, axis=1) >= 0))
    ok = rep.origin_residual == 0.0 and delta_ok and C_ok
    assert record_acceptance(8, ok, f"residual={rep.origin_residual}; delta={rep.delta_table}; "
                                    f"C nondecreasing={C_ok}")


def _bytes(d):
    return {f: (d / f).read_bytes() for f in sorted(os.listdir(d))}


def test_9_determinism(tmp_path):
    runs = {
        "example": ["example", "--M", "1", "--K", "0.025"],
        "bounds": ["bounds", "--ensemble", '{"count": 1000, "horizon": 200}'],
        "falsify_a": ["falsify", "--model", "growth", "--claim",
                      '{"type": "envelope", "beta": "2*s*exp(-t)", "T_bound": 0.1}', "--budget",
                      '{"restarts": 1, "iterations": 0}'],
        "falsify_b": ["falsify", "--claim", json.dumps({"type": "envelope", "alpha1": "pow(s,2)",
                                                         "alpha2": "pow(s,2)", "alpha3": "3*pow(s,4)+pow(s,2)",
                                                         "rho": "s/0.025", "M0": 1, "E0": 0.025, "T_bound": 2.0})],
        "falsify_c": ["falsify", "--budget", '{"restarts": 10000}'],
        "probe": ["probe"],
        "simulate": ["simulate", "--periods-spec", '{"mode": "uniform", "T_max": 0.06}',
                     "--errors-spec", '{"mode": "ball", "bound": 0.025}'],
    }
    same = {}
    for name, argv in runs.items():
        outs = []
        for w in ("1", "8"):
            d = tmp_path / f"{name}_{w}"
            run(argv + ["--seed", "9", "--workers", w, "--out", str(d)])
            outs.append(_bytes(d))
        same[name] = outs[0] == outs[1] and len(outs[0]) >= 2
    loop = example_closed_loop()
    spec = ScenarioSpec(1000, 1.0, 1, SamplingSpec("uniform", 0.06, 200), ErrorSpec("zero", 0.0, 1, 200), seed=3)
    sc = make_scenarios(spec)
    e1, e8 = simulate_batch(loop, *sc, workers=1), simulate_batch(loop, *sc, workers=8)
    same["ensemble"] = e1.states.tobytes() == e8.states.tobytes()
    grid = DecreaseGrid(np.linspace(-1, 1, 401)[:, None], np.linspace(-0.025, 0.025, 41)[:, None],
                        np.arange(1, 33) / 33)
    cand = LyapunovCandidate(lyapunov_function("pow(s,2)"), SQ, SQ, A3, M=1.0, E=0.025, rho=RHO)
    r1 = certify_decrease(loop, cand, Mode.SISSVSR, 0.06, grid, workers=1).to_dict()
    r8 = certify_decrease(loop, cand, Mode.SISSVSR, 0.06, grid, workers=8).to_dict()
    same["certify"] = json.dumps(r1) == json.dumps(r8)
    ok = all(same.values())
    assert record_acceptance(9, ok, "byte-identical for workers 1 vs 8: " + ", ".join(
        f"{k}={'yes' if v else 'NO'}" for k, v in same.items()))


# ---- criterion 10: property suites, 1000 cases each -------------------------------------

FNS = [SQ, A3, ExprFn("s+exp(s)-1"), TableFn([0, 0.5, 2], [0, 1, 1.5]), ComposedFn(A3, InverseFn(SQ)),
       MaxFn(ExprFn("s"), SQ), ScaledFn(2.0, InverseFn(A3))]
BETA = beta_from_certificate(SQ, SQ, A3)
BETA2 = beta_from_certificate(SQ, ExprFn("2*pow(s,2)"), ExprFn("s"), scale=2.0)
LOOP = example_closed_loop()
CAND = LyapunovCandidate(lyapunov_function("pow(s,2)"), SQ, SQ, A3, M=1.0, E=0.025, rho=RHO)
_PROPERTY_RESULTS = {}




pos = st.floats(0, 20, allow_nan=False)


@settings(max_examples=PROPERTY_CASES, database=None)
@given(pos, pos, st.integers(0, len(FNS) - 1))
def test_10a_comparison_monotone(s1, s2, i):
    _PROPERTY_RESULTS["ComparisonFn monotonicity"] = _PROPERTY_RESULTS.get("ComparisonFn monotonicity", 0) + 1
    f = FNS[i]
    lo, hi = sorted((s1, s2))
    assert f(0.0) == 0.0
    if hi > lo * (1 + 1e-9) + 1e-12:
        assert f(lo) < f(hi)
    else:
        assert f(lo) <= f(hi) * (1 + 1e-12)


@settings(max_examples=PROPERTY_CASES, database=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 8), st.floats(0, 8), st.booleans())
def test_10b_kl_monotone(s1, s2, t1, t2, which):
    _PROPERTY_RESULTS["KLFn monotonicity"] = _PROPERTY_RESULTS.get("KLFn monotonicity", 0) + 1
    b = BETA if which else BETA2
    (sa, sb), (ta, tb) = sorted((s1, s2)), sorted((t1, t2))
    assert b(sa, ta) <= b(sb, ta) * (1 + 1e-9) + 1e-300
    assert b(sa, tb) <= b(sa, ta) * (1 + 1e-9) + 1e-300
    assert b(0.0, ta) == 0.0


@settings(max_examples=PROPERTY_CASES, database=None)
@given(st.floats(-1, 1), st.floats(-0.99, 0.99), st.floats(1e-6, 0.5))
def test_10c_margin_reproducible(x, efrac, T):
    _PROPERTY_RESULTS["margin reproducibility"] = _PROPERTY_RESULTS.get("margin reproducibility", 0) + 1
    e = efrac * 0.025 * abs(x)
    grid = DecreaseGrid(np.array([[x]]), np.array([[e]]), np.array([0.5]), paired=True)
    rep = certify_decrease(LOOP, CAND, Mode.SISSVSR, 2 * T, grid)
    w = rep.witness
    again = decrease_margin(LOOP, CAND, np.array([w["x"]]), np.array([w["e"]]), np.array([w["T"]]))[0]
    assert again == pytest.approx(rep.min_margin, rel=1e-12, abs=1e-300)


@settings(max_examples=PROPERTY_CASES, database=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=12), st.lists(st.floats(-1, 1), min_size=1, max_size=12),
       st.floats(0.01, 0.5))
def test_10d_grid_refinement(xs, extra, T):
    _PROPERTY_RESULTS["grid refinement"] = _PROPERTY_RESULTS.get("grid refinement", 0) + 1
    es = np.linspace(-0.025, 0.025, 3)[:, None]
    coarse = DecreaseGrid(np.array(xs)[:, None], es, np.array([0.3, 0.9]))
    fine = DecreaseGrid(np.array(xs + extra)[:, None], es, np.array([0.3, 0.6, 0.9]))
    mc = certify_decrease(LOOP, CAND, Mode.SISSVSR, T, coarse).min_margin
    mf = certify_decrease(LOOP, CAND, Mode.SISSVSR, T, fine).min_margin
    if not math.isnan(mc):
        assert mf <= mc


@settings(max_examples=PROPERTY_CASES, database=None)
@given(st.floats(-1.5, 1.5), st.floats(0.01, 0.2), st.integers(0, 2**31 - 1))
def test_10e_converse_lower_bound(xi, T_star, seed):
    _PROPERTY_RESULTS["converse lower bound"] = _PROPERTY_RESULTS.get("converse lower bound", 0) + 1
    v = converse_lyapunov_estimate(LOOP, SQ, [xi], T_star, horizon=8, count=3, seed=seed)
    assert v >= SQ(abs(xi))


def test_10_summary():
    """Runs after the property suites in file order and reports their case counts."""
    names = ["ComparisonFn monotonicity", "KLFn monotonicity", "margin reproducibility", "grid refinement",
             "converse lower bound"]
    counts = {n: _PROPERTY_RESULTS.get(n, 0) for n in names}
    ok = all(c >= PROPERTY_CASES for c in counts.values())
    assert record_acceptance(10, ok, "; ".join(f"{n}: {c} cases" for n, c in counts.items()))
