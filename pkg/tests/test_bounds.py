import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vsrstab.bounds import (
    ComparisonFlow,
    beta_from_certificate,
    comparison_ode,
    converse_lyapunov_estimate,
    envelope_check,
    gamma_from_certificate,
    inflate_M,
    lemma1_probe,
    monotone_majorant,
    sigma_eta_estimate,
    tbar_threshold,
)
from vsrstab.comparison import ExprFn, ExprKL, Kind, is_class_k, is_class_kl
from vsrstab.errors import DomainMismatch
from vsrstab.example import example_closed_loop
from vsrstab.models import parse_model
from vsrstab.trajectory import ErrorSpec, SamplingSpec, ScenarioSpec, make_scenarios, simulate_batch

SQ = ExprFn("pow(s,2)")
A3 = ExprFn("3*pow(s,4)+pow(s,2)")
LIN = ExprFn("s")
RATE = ExprFn("3*pow(s,2)+s")
FLOW = ComparisonFlow(RATE, s_top=10.0)


def exact_rate_flow(s, t):
    """Closed form of y' = -(3y^2 + y): y/(3y+1) decays like e^-t."""
    c = s / (3 * s + 1) * math.exp(-t)
    return c / (1 - 3 * c)


def test_comparison_ode_examples():
    assert comparison_ode(LIN, 2.0, 1.0) == pytest.approx(2 * math.exp(-1), abs=1e-8)
    assert comparison_ode(RATE, 0.7, 0.0) == 0.7
    v = comparison_ode(RATE, 1.0, 1.0)
    assert 0 < v < math.exp(-1)
    assert v == pytest.approx(exact_rate_flow(1.0, 1.0), rel=1e-10)


def test_cached_flow_matches_closed_form():
    flow = ComparisonFlow(RATE)
    s = np.array([1e-6, 0.01, 0.3, 1.0, 5.0, 80.0])
    for t in (0.0, 0.01, 0.5, 3.0, 40.0):
        got = flow(s, np.full_like(s, t))
        want = [exact_rate_flow(a, t) for a in s]
        assert np.allclose(got, want, rtol=1e-9, atol=0)


def test_beta_examples():
    b = beta_from_certificate(SQ, SQ, SQ)
    assert b(2.0, 2.0) == pytest.approx(2 * math.exp(-1), abs=1e-8)
    s = np.linspace(0, 3, 13)
    assert np.allclose(beta_from_certificate(SQ, SQ, A3)(s, 0.0), s, rtol=1e-8)
    ts = np.linspace(0, 5, 30)
    vals = beta_from_certificate(SQ, SQ, A3)(1.0, ts)
    assert np.all(np.diff(vals) < 0)


def test_beta_requires_kinf():
    with pytest.raises(DomainMismatch):
        beta_from_certificate(ExprFn("pow(s,2)", kind=Kind.K), SQ, A3)


def test_beta_is_kl():
    b = beta_from_certificate(SQ, SQ, A3)
    assert is_class_kl(b, np.linspace(0, 4, 15), np.linspace(0, 6, 15), tail_t=400.0, tail_tol=1e-6)


def test_beta_dominates_identity_when_alpha1_below_alpha2():
    b = beta_from_certificate(SQ, ExprFn("2*pow(s,2)"), A3)
    s = np.linspace(0, 3, 31)
    assert np.all(b(s, 0.0) >= s * (1 - 1e-12))


def test_gamma_examples():
    g = gamma_from_certificate(SQ, SQ, LIN)
    assert g(1.0) == pytest.approx(math.sqrt(2), abs=1e-8)
    assert g(0.0) == 0.0


def test_sigma_eta_zero_map():
    se = sigma_eta_estimate(parse_model("zero"), ExprFn("s/0.025"), np.linspace(0, 0.1, 6), 0.06)
    assert np.all(se.sigma == 0)
    s = np.linspace(0, 0.5, 11)
    assert np.allclose(se.eta(s), s / 0.025)


def test_sigma_eta_paper_example():
    rho = ExprFn("s/0.025")
    grid = np.array([0.0, 1e-4, 1e-3, 5e-3, 1e-2, 2.5e-2])
    se = sigma_eta_estimate(example_closed_loop(), rho, grid, 0.06)
    assert se.sigma[0] == 0.0
    assert se.sigma[1] < 1e-2  # right-continuity at zero
    assert np.all(np.diff(se.sigma) >= 0)
    assert np.all(se.eta(grid) >= rho(grid))
    assert np.all(se.zeta(grid) >= se.sigma)
    g = gamma_from_certificate(SQ, SQ, se.eta)
    fine = np.linspace(0, 0.03, 200)
    assert is_class_k(g, fine)


def test_majorant_is_strict_and_above_samples():
    z = monotone_majorant([0.0, 1.0, 2.0, 3.0], [0.0, 2.0, 1.0, 2.0])
    s = np.array([0.0, 1.0, 2.0, 3.0])
    assert np.all(np.diff(z(s)) > 0)
    assert z(1.0) >= 2.0 and z(2.0) >= 2.0


def test_tbar():
    T = tbar_threshold()
    f = lambda T: 1 - math.exp(-2 * T) - T  # noqa: E731
    assert T == pytest.approx(0.796812, abs=1e-6)
    assert f(T / 2) > 0 and f(1.0) < 0
    assert abs(f(T)) < 1e-9


def test_inflate_M():
    assert inflate_M(SQ, SQ, 1.0) == pytest.approx(1.0)
    assert inflate_M(SQ, ExprFn("4*pow(s,2)"), 1.0) == pytest.approx(2.0)
    assert inflate_M(SQ, SQ, 1.0, 0.1, ExprFn("20*s")) == pytest.approx(2.0)


def _single(states, periods, errors=None):
    from vsrstab.trajectory import Ensemble, elapsed_times

    states = np.asarray(states, dtype=float).reshape(1, -1, 1)
    periods = np.asarray(periods, dtype=float).reshape(1, -1)
    errors = np.zeros(periods.shape + (1,)) if errors is None else np.asarray(errors, float).reshape(1, -1, 1)
    return Ensemble(states, periods, errors, elapsed_times(periods), np.array([-1]))


def test_envelope_zero_trajectory():
    ens = _single(np.zeros(11), np.full(10, 0.1))
    rep = envelope_check(ens, ExprKL("s*exp(-t)"), LIN, 0.0)
    assert rep.ok and rep.checked_points == 11


def test_envelope_growth_violates_from_k1():
    ens = _single(1.1 ** np.arange(21), np.full(20, 0.1))
    rep = envelope_check(ens, ExprKL("s*exp(-t)"))
    assert [v.k for v in rep.violations] == list(range(1, 21))
    assert all(v.excess > 0 for v in rep.violations)
    assert rep.to_dict()["violations"][0]["k"] == 1


def test_envelope_sup_over_prefix():
    # |x_1| = 0.5 is covered only through gamma(|e_0|); e_1 must not count at k=1
    ens = _single([0.0, 0.5, 0.0], [0.1, 0.1], errors=[0.5, 10.0])
    assert envelope_check(ens, ExprKL("s*exp(-t)"), LIN).ok
    ens = _single([0.0, 0.5, 0.0], [0.1, 0.1], errors=[0.1, 10.0])
    rep = envelope_check(ens, ExprKL("s*exp(-t)"), LIN)
    assert [v.k for v in rep.violations] == [1]
    assert envelope_check(ens, ExprKL("s*exp(-t)"), LIN, R=0.4).ok


def test_envelope_paper_ensemble():
    M = inflate_M(SQ, SQ, 1.0)
    spec = ScenarioSpec(1000, M, 1, SamplingSpec("uniform", 0.06, 200), ErrorSpec("zero", 0.0, 1, 200), seed=11)
    ens = simulate_batch(example_closed_loop(), *make_scenarios(spec))
    rep = envelope_check(ens, beta_from_certificate(SQ, SQ, A3))
    assert rep.ok and rep.checked_points == 1000 * 201


def test_envelope_with_errors_from_construction():
    """S-ISS pair on the example, errors on the sphere of radius E0."""
    from vsrstab.falsifier import envelope_from_certificate

    loop = example_closed_loop()
    env = envelope_from_certificate(loop, SQ, SQ, A3, ExprFn("s/0.025"), 1.0, 0.025, 0.06)
    spec = ScenarioSpec(300, 1.0, 1, SamplingSpec("uniform", 0.06, 150), ErrorSpec("sphere", 0.025, 1, 150), seed=2)
    rep = envelope_check(simulate_batch(loop, *make_scenarios(spec)), env.beta, env.gamma)
    assert rep.ok


def test_converse_estimate():
    loop = example_closed_loop()
    assert converse_lyapunov_estimate(loop, SQ, [0.0], 0.06, horizon=20, count=10) == 0.0
    v1 = converse_lyapunov_estimate(loop, SQ, [0.8], 0.06, horizon=30, count=20, seed=4)
    v2 = converse_lyapunov_estimate(loop, SQ, [0.8], 0.06, horizon=30, count=60, seed=4)
    assert v1 >= SQ(0.8) and v2 >= v1


def test_lemma1_probe_zero_map():
    tab = lemma1_probe(parse_model("zero"), 1.0, 0.0, 0.1, [0.01, 0.1], [1.0], count=20, horizon=10,
                       delta_candidates=[0.001, 0.005, 0.05, 0.5])
    assert tab.delta_table == [0.005, 0.05]  # x0 itself must stay within eps
    assert all(t < 0.1 for t in tab.attract_table)  # one step suffices
    assert all(t > 0 for t in tab.attract_table)


def test_lemma1_probe_paper_and_growth():
    tab = lemma1_probe(example_closed_loop(), 1.0, 0.0, 0.06, [0.05, 0.1, 0.5], [1.0], count=100, horizon=300)
    assert math.isfinite(tab.attract_table[1])
    assert tab.attract_table == sorted(tab.attract_table, reverse=True)
    grow = lemma1_probe(parse_model("growth"), 1.0, 0.0, 0.1, [1e-3], [0.5, 2.0, 8.0], count=20, horizon=200,
                        delta_candidates=[1e-6, 1e-5])
    assert grow.delta_table == [None]
    assert grow.C_table == sorted(grow.C_table) and grow.C_table[-1] > grow.C_table[0]


@given(st.floats(0, 5), st.floats(0, 3), st.floats(0, 3))
def test_semigroup(s, t1, t2):
    flow = FLOW
    a = flow(flow(s, t1), t2)
    b = flow(s, t1 + t2)
    assert a == pytest.approx(b, rel=1e-7, abs=1e-12)


@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 5))
def test_flow_monotone(s1, s2, t1, t2):
    flow = FLOW
    (sa, sb), (ta, tb) = sorted((s1, s2)), sorted((t1, t2))
    assert flow(sa, ta) <= flow(sb, ta) * (1 + 1e-12)
    assert flow(sa, tb) <= flow(sa, ta) * (1 + 1e-12)
