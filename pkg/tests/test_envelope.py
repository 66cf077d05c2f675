import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wickmart import ValidationError
from wickmart.envelope import (
    ConeConfig,
    calibrate_cone,
    calibration_grid,
    cone_checks,
    cone_value,
    envelope_curve,
    zero_envelope,
)
from wickmart.wickpoly import Polynomial, monomial, wick_order

SQRT_3_PLUS_SQRT6 = math.sqrt(3 + math.sqrt(6))


@pytest.mark.parametrize("t", [0.1, 1.0, 10.0, 100.0])
def test_quartic_envelope_closed_form(t):
    f = zero_envelope(monomial(4), t)
    assert abs(f * f - (3 + math.sqrt(6)) * t) <= 1e-9 * t


def test_quartic_envelope_frozen_value():
    assert zero_envelope(monomial(4), 1.0) == pytest.approx(SQRT_3_PLUS_SQRT6, abs=1e-12)


def test_envelope_requires_positive_time():
    with pytest.raises(ValidationError):
        zero_envelope(monomial(4), 0.0)
    with pytest.raises(ValidationError):
        envelope_curve(monomial(4), [-1.0])


def test_envelope_at_time_zero_is_outer_root_of_base():
    assert envelope_curve(monomial(4), [0.0])[0] == pytest.approx(0.0, abs=1e-12)
    # (x^2 - 1)^2 has a double root at +-1 that does not change sign
    P = wick_order(Polynomial((1, 0, -2, 0, 1)))
    assert envelope_curve(P, [0.0])[0] == pytest.approx(1.0, abs=1e-6)


def test_envelope_no_real_roots_gives_zero():
    # x^4 + 1 at t = 0 has no real roots
    P = wick_order(Polynomial((1, 0, 0, 0, 1)))
    assert envelope_curve(P, [0.0])[0] == 0.0


def test_sextic_envelope_against_numpy_roots():
    P = monomial(6)
    for t in (0.3, 2.0, 7.0):
        r = np.roots(P.coeffs_at(t)[::-1])
        real = r.real[np.abs(r.imag) < 1e-9]
        assert zero_envelope(P, t) == pytest.approx(np.max(np.abs(real)), rel=1e-10)


coeff_lists = st.integers(2, 4).flatmap(
    lambda n: st.lists(st.integers(-5, 5), min_size=2 * n, max_size=2 * n).map(lambda c: tuple(c) + (1,))
)


@settings(max_examples=40, deadline=None)
@given(coeff_lists, st.floats(0.05, 20))
def test_polynomial_positive_beyond_envelope(coeffs, t):
    P = wick_order(Polynomial(coeffs))
    f = zero_envelope(P, t)
    u = f + np.geomspace(1e-6, 50, 200)
    scale = np.polynomial.polynomial.polyval(u, np.abs(P.coeffs_at(t)))
    assert np.all(P(u, t) > -1e-9 * scale)
    assert np.all(P(-u, t) > -1e-9 * scale)
    if f > 0:
        assert abs(P(f, t)) <= 1e-7 * np.polynomial.polynomial.polyval(f, np.abs(P.coeffs_at(t))) or abs(
            P(-f, t)
        ) <= 1e-7 * np.polynomial.polynomial.polyval(f, np.abs(P.coeffs_at(t)))


@pytest.mark.parametrize(
    "coeffs,A",
    [((0, 0, 0, 0, 1), 3.0), ((0, 0, 0, 0, 0, 0, 1), 4.0), ((0, 0, 1, 0, 1), 3.0)],
)
def test_calibrated_offsets(coeffs, A):
    P = wick_order(Polynomial(coeffs))
    cone = calibrate_cone(P, 50.0)
    assert cone.A == A
    ts = calibration_grid(50.0)
    assert all(cone_checks(P, cone.A, ts, envelope_curve(P, ts)).values())


def test_offset_slopes(cone4):
    assert cone4.a_prime(0.5) == 3.0
    assert cone4.a_prime(0.25) == 6.0
    with pytest.raises(KeyError):
        cone4.a_prime(0.1)


def test_slopes_dominate_envelope(P4, cone4):
    ts = np.linspace(0, 50, 2001)
    f = envelope_curve(P4, ts)
    for eps, ap in cone4.eps_table:
        assert np.all(f <= eps * ts + ap + 1e-12)


def test_eps_validation(P4):
    with pytest.raises(ValidationError):
        calibrate_cone(P4, 10.0, eps_list=(1.5,))
    with pytest.raises(ValidationError):
        calibrate_cone(P4, -1.0)


def test_cone_value_positive_and_increasing(P4, cone4):
    t = np.linspace(0, 50, 501)
    v = cone_value(P4, cone4, t)
    assert np.all(v > 0)
    assert np.all(np.diff(v) > 0)


def test_cone_json_roundtrip(tmp_path, cone4):
    p = tmp_path / "cone.json"
    cone4.save(p)
    back = ConeConfig.load(p)
    assert back == cone4
    assert json.loads(p.read_text())["A"] == 3.0
