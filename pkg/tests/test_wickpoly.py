from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wickmart import ValidationError
from wickmart.wickpoly import (
    MAX_DEGREE,
    Polynomial,
    evaluate,
    evaluate_dx,
    hermite,
    monomial,
    parse_coeffs,
    wick_expand,
    wick_order,
)

# probabilists' Hermite polynomials, ascending coefficients
HE = {
    0: (1,),
    1: (0, 1),
    2: (-1, 0, 1),
    3: (0, -3, 0, 1),
    4: (3, 0, -6, 0, 1),
    5: (0, 15, 0, -10, 0, 1),
    6: (-15, 0, 45, 0, -15, 0, 1),
}


def test_hermite_table_matches_known_rows():
    tab = hermite(6)
    for k, row in HE.items():
        assert tab[k] == row


def test_hermite_rejects_degree_over_cap():
    with pytest.raises(ValidationError):
        hermite(MAX_DEGREE + 1)


def test_hermite_evaluation_matches_numpy_hermite_e():
    x = np.linspace(-3, 3, 13)
    tab = hermite(10)
    for k in range(11):
        ref = np.polynomial.hermite_e.hermeval(x, [0] * k + [1])
        np.testing.assert_allclose(tab(k, x), ref, rtol=1e-12, atol=1e-9)


def test_quartic_terms():
    assert [(j, k, int(c)) for j, k, c in monomial(4).terms()] == [(4, 0, 1), (2, 1, -6), (0, 2, 3)]


def test_quartic_plus_quadratic_terms():
    P = wick_order(Polynomial((0, 0, 1, 0, 1)))
    got = {(j, k): int(c) for j, k, c in P.terms()}
    assert got == {(4, 0): 1, (2, 0): 1, (2, 1): -6, (0, 1): -1, (0, 2): 3}


def test_quartic_values():
    P = monomial(4)
    assert evaluate(P, 2.0, 1.0) == pytest.approx(-5.0, abs=1e-14)
    assert evaluate_dx(P, 2.0, 1.0) == pytest.approx(8.0, abs=1e-14)
    assert evaluate(P, 0.0, 1.0) == pytest.approx(3.0, abs=1e-14)
    assert P.min_value(1.0) == pytest.approx(-6.0, abs=1e-12)
    assert P.min_value(2.5) == pytest.approx(-6 * 2.5**2, rel=1e-12)


def test_negative_time_rejected():
    with pytest.raises(ValidationError):
        evaluate(monomial(4), 1.0, -0.1)
    with pytest.raises(ValidationError):
        evaluate_dx(monomial(4), 1.0, -0.1)


@pytest.mark.parametrize("coeffs", [(0, 0, 1), (0, 0, 0, 1), (0, 0, 0, 0, 2), (0,) * 66 + (1,), (0, 0, 0, 0, 0, 1)])
def test_polynomial_validation(coeffs):
    with pytest.raises(ValidationError):
        Polynomial(coeffs)


def test_parse_accepts_fractions_and_decimals():
    assert parse_coeffs("1/2, 0.25,0,0,1") == [Fraction(1, 2), Fraction(1, 4), 0, 0, 1]
    with pytest.raises(ValidationError):
        parse_coeffs("a,b")
    with pytest.raises(ValidationError):
        parse_coeffs("")


def _gaussian_moment(j: int, t: Fraction) -> Fraction:
    if j % 2:
        return Fraction(0)
    out = Fraction(1)
    for k in range(1, j, 2):
        out *= k
    return out * t ** (j // 2)


coeff_lists = st.integers(2, 5).flatmap(
    lambda n: st.lists(st.integers(-20, 20), min_size=2 * n, max_size=2 * n).map(lambda c: tuple(c) + (1,))
)


@settings(max_examples=60, deadline=None)
@given(coeff_lists, st.fractions(min_value=0, max_value=10, max_denominator=7))
def test_expectation_is_constant_term_exactly(coeffs, t):
    # E[P_R(B_t; t)] = a_0, in exact arithmetic through Gaussian moments
    tab = wick_expand(coeffs)
    mean = sum(c * t**k * _gaussian_moment(j, t) for j, row in enumerate(tab) for k, c in enumerate(row))
    assert mean == coeffs[0]


@settings(max_examples=40, deadline=None)
@given(coeff_lists, coeff_lists)
def test_wick_expand_is_linear(a, b):
    n = max(len(a), len(b))
    a2, b2 = a + (0,) * (n - len(a)), b + (0,) * (n - len(b))
    s = tuple(x + 2 * y for x, y in zip(a2, b2))
    ta, tb, ts = wick_expand(a2), wick_expand(b2), wick_expand(s)
    for j in range(len(ts)):
        for k in range(len(ts[j])):
            assert ts[j][k] == ta[j][k] + 2 * tb[j][k]


@settings(max_examples=40, deadline=None)
@given(coeff_lists, st.floats(-3, 3), st.floats(0.05, 4))
def test_space_time_harmonic(coeffs, x, t):
    # dP/dt + P''/2 = 0, which makes P(B_t; t) a martingale
    P = wick_order(Polynomial(coeffs))
    lhs = P.dt(x, t) + 0.5 * P.dxx(x, t)
    scale = 1 + abs(P.dt(x, t)) + abs(P.dxx(x, t))
    assert abs(lhs) <= 1e-9 * scale


@settings(max_examples=40, deadline=None)
@given(coeff_lists, st.floats(-3, 3))
def test_time_zero_recovers_base(coeffs, x):
    P = wick_order(Polynomial(coeffs))
    assert P(x, 0.0) == pytest.approx(Polynomial(coeffs)(x), rel=1e-12, abs=1e-9)


def test_derivative_against_finite_difference():
    P = wick_order(Polynomial((1, -2, 0, 3, -1, 0, 1)))
    for x, t in [(0.3, 0.7), (-1.2, 2.0), (2.5, 0.1)]:
        h = 1e-6
        fd = (P(x + h, t) - P(x - h, t)) / (2 * h)
        assert P.dx(x, t) == pytest.approx(fd, rel=1e-6)


def test_coeffs_at_consistent_with_evaluation():
    P = wick_order(Polynomial((0, 1, 2, 0, 1)))
    t = np.array([0.0, 0.5, 3.0])
    c = P.coeffs_at(t)
    for i, tt in enumerate(t):
        assert np.polynomial.polynomial.polyval(1.7, c[i]) == pytest.approx(P(1.7, tt), rel=1e-13)
