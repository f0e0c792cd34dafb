import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vsrstab.comparison import (
    ComposedFn,
    ExprFn,
    ExprKL,
    InverseFn,
    Kind,
    MaxFn,
    ScaledFn,
    TableFn,
    comparison_fn,
    compose_k,
    eval_k,
    invert_k,
    is_class_k,
    is_class_kl,
)
from vsrstab.errors import DomainExceeded, DomainMismatch, InvalidExpression, RangeExceeded

SQ = ExprFn("pow(s,2)")
A3 = ExprFn("3*pow(s,4)+pow(s,2)")


def test_eval_closed_forms():
    assert eval_k(SQ, 3.0) == 9.0
    assert eval_k(A3, 1.0) == 4.0
    assert eval_k(A3, 0.0) == 0.0


def test_invert_examples():
    assert invert_k(SQ, 4.0) == pytest.approx(2.0, rel=1e-12)
    assert invert_k(A3, 0.0) == 0.0
    assert invert_k(A3, 4.0) == pytest.approx(1.0, rel=1e-10)


def test_invert_by_bisection_matches_oracle():
    # a non-monomial without closed-form inverse; oracle: scipy brentq
    from scipy.optimize import brentq

    f = ExprFn("s + exp(s) - 1")
    for y in (0.1, 1.0, 7.5, 100.0):
        oracle = brentq(lambda s: s + math.exp(s) - 1 - y, 0, 10, xtol=1e-15)
        assert invert_k(f, y) == pytest.approx(oracle, rel=1e-9)


def test_compose_examples():
    h = compose_k(ExprFn("2*s"), SQ)
    assert h(3.0) == pytest.approx(18.0)
    alpha = compose_k(A3, InverseFn(SQ))
    assert alpha(4.0) == pytest.approx(52.0, rel=1e-12)
    ident = compose_k(A3, ExprFn("s"))
    grid = np.linspace(0, 3, 31)
    assert np.allclose(ident(grid), A3(grid), rtol=0, atol=0)


def test_table_function_and_extrapolation():
    f = TableFn([0, 1, 2], [0, 1, 3])
    assert f(1.5) == pytest.approx(2.0)
    assert f(3.0) == pytest.approx(5.0)  # last segment continued
    assert f.caveats
    assert f.inverse(2.0) == pytest.approx(1.5)
    g = TableFn([0, 1, 2], [0, 1, 3], extrapolate=False)
    with pytest.raises(DomainExceeded):
        g(2.5)
    with pytest.raises(RangeExceeded):
        g.inverse(4.0)


def test_table_rejects_bad_knots():
    with pytest.raises(ValueError):
        TableFn([0, 1, 1], [0, 1, 2])
    with pytest.raises(ValueError):
        TableFn([0, 1], [0.5, 1])


def test_composition_leaving_table_domain():
    outer = TableFn([0, 1, 2], [0, 1, 3], extrapolate=False)
    h = compose_k(outer, ExprFn("2*s"))
    assert h(0.5) == pytest.approx(1.0)
    with pytest.raises(DomainMismatch):
        h(1.5)


def test_f_of_zero_enforced_and_bad_syntax():
    with pytest.raises(InvalidExpression):
        ExprFn("s+1")
    with pytest.raises(InvalidExpression):
        ExprFn("__import__('os')")


def test_negative_argument_rejected():
    with pytest.raises(DomainExceeded):
        SQ(-1.0)


def test_kinf_unbounded():
    k = np.arange(0, 120)
    vals = A3(2.0 ** k)
    assert np.all(np.diff(vals) > 0) and vals[-1] > 1e100


def test_comparison_fn_specs():
    assert comparison_fn("pow(s,3)")(2.0) == 8.0
    assert comparison_fn({"table": [[0, 0], [1, 2]]})(0.5) == 1.0
    assert comparison_fn({"expr": "s", "kind": "K"}).kind is Kind.K


def test_wrappers():
    assert ScaledFn(2.0, SQ)(3.0) == 18.0
    assert ScaledFn(2.0, SQ).inverse(18.0) == pytest.approx(3.0)
    m = MaxFn(ExprFn("s"), SQ)
    assert m(0.5) == 0.5 and m(2.0) == 4.0
    assert m.inverse(4.0) == pytest.approx(2.0)
    assert m.inverse(0.5) == pytest.approx(0.5)


def test_class_checks():
    assert is_class_k(A3, np.linspace(0, 5, 200))
    beta = ExprKL("s*exp(-t)")
    assert is_class_kl(beta, np.linspace(0, 5, 20), np.linspace(0, 5, 20), tail_t=60.0)
    assert not is_class_kl(ExprKL("s"), np.linspace(0, 5, 20), np.linspace(0, 5, 20), tail_t=60.0)


@given(st.floats(0, 50))
def test_round_trip(s):
    for f in (SQ, A3, ExprFn("s + exp(s) - 1"), TableFn([0, 1, 3], [0, 2, 3])):
        assert invert_k(f, eval_k(f, s)) == pytest.approx(s, rel=1e-8, abs=1e-12)


@given(st.floats(0, 20))
def test_associativity(s):
    f, g, h = ExprFn("2*s+pow(s,3)"), SQ, ExprFn("s+exp(s)-1")
    lhs = ComposedFn(ComposedFn(f, g), h)(s)
    rhs = ComposedFn(f, ComposedFn(g, h))(s)
    assert lhs == pytest.approx(rhs, rel=1e-12)


@given(st.floats(0, 10), st.floats(0, 10))
def test_monotone_inverse(y1, y2):
    lo, hi = sorted((y1, y2))
    assert invert_k(A3, lo) <= invert_k(A3, hi)
