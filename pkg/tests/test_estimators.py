import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, special

from wickmart import ValidationError
from wickmart.estimators import (
    McEstimate,
    _jackknife_lme,
    ci_overlap,
    exp_martingale_check,
    log_mean_exp,
    mgf_curve,
    neg_exp_estimate,
    neg_exp_moment,
    pair_integral,
    qv_bound,
    rect_autocorrelation,
    sup_abs_derivative,
)
from wickmart.gff import GridDomain, KernelDecomposition


def test_mc_estimate_basics():
    with pytest.raises(ValidationError):
        McEstimate(0.0, 1.0, 99)
    with pytest.raises(ValidationError):
        McEstimate.from_samples(np.zeros(10))
    e = McEstimate.from_samples(np.arange(100.0), seed=3)
    assert e.mean == 49.5 and e.n == 100 and e.seed == 3
    assert e.stderr == pytest.approx(np.std(np.arange(100.0), ddof=1) / 10)
    assert e.z_score(49.5) == 0.0
    lo, hi = e.ci()
    assert lo < 49.5 < hi
    assert McEstimate(1.0, 0.0, 100).z_score(1.0) == 0.0
    assert McEstimate(1.0, 0.0, 100).z_score(0.0) == math.inf
    assert e.to_json() == {"mean": e.mean, "stderr": e.stderr, "n": 100, "seed": 3}


@pytest.mark.parametrize("lam,t", [(0.5, 1.0), (1.0, 2.0), (2.0, 1.0)])
def test_exponential_martingale(lam, t):
    e = exp_martingale_check(lam, t, 100_000, seed=1)
    assert abs(e.z_score(1.0)) < 4


def test_exponential_martingale_edges():
    e = exp_martingale_check(0.0, 1.0, 1000)
    assert e.mean == 1.0 and e.stderr == 0.0
    with pytest.raises(ValidationError):
        exp_martingale_check(2.5, 1.0, 1000)
    with pytest.raises(ValidationError):
        exp_martingale_check(1.0, -1.0, 1000)


@settings(max_examples=100)
@given(arrays(float, st.integers(2, 50), elements=st.floats(-500, 500)))
def test_log_mean_exp_matches_logsumexp(a):
    ref = special.logsumexp(a) - math.log(a.size)
    assert log_mean_exp(a) == pytest.approx(ref, rel=1e-12, abs=1e-12)
    assert _jackknife_lme(a)[0] == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_mgf_of_gaussian_is_quadratic():
    y = 2.0 * np.random.default_rng(0).standard_normal(20_000)
    c = mgf_curve(y, np.linspace(-0.2, 0.2, 9))
    # ln E[e^{aY}] = 2 a^2 for Y ~ N(0, 4)
    assert c.quad_fit == pytest.approx(2.0, rel=0.05)
    assert c.quartic_ratio < 0.2
    assert c.values[4] == 0.0
    assert c.convexity_violations() == 0
    assert not c.quadratic_rejected
    assert set(c.to_json()) >= {"alphas", "log_mgf", "stderr", "quartic_ratio"}


def test_mgf_validation_and_overflow_drop():
    with pytest.raises(ValidationError):
        mgf_curve(np.zeros(999), [-0.1, 0.0, 0.1])
    with pytest.raises(ValidationError):
        mgf_curve(np.zeros(2000), [-0.1, 0.0, 0.2])
    y = np.random.default_rng(1).standard_normal(2000)
    y[0] = 1e4
    c = mgf_curve(y, [-0.1, 0.0, 0.1])
    assert c.dropped == [-0.1, 0.1]
    assert c.quadratic_rejected and math.isnan(c.quad_fit)


@pytest.mark.parametrize("s,a", [(0.5, 1.0), (10.0, 1.0), (1e4, 0.7), (3.0, 2.5)])
def test_rect_autocorrelation_against_quadrature(s, a):
    ref, _ = integrate.quad(lambda d: 2 * (a - d) * math.exp(-s * d * d / 2), 0, a, epsabs=0, epsrel=1e-12)
    assert rect_autocorrelation(s, a) == pytest.approx(ref, rel=1e-9)


def test_pair_integral_large_scale_expansion():
    u, a, b = 8.0, 1.0, 1.0
    approx = (2 * math.pi * a * b * math.exp(-2 * u) - 2 * math.sqrt(2 * math.pi) * (a + b) * math.exp(-3 * u)
              + 4 * math.exp(-4 * u))
    assert pair_integral(u, (a, b)) == pytest.approx(approx, rel=1e-9)
    assert pair_integral(0.0, (1.0, 1.0)) < 1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 10.0), st.floats(0.1, 15.0))
def test_sup_abs_derivative_brute_force(P4, t, g):
    v = np.linspace(-g, g, 20001)
    brute = np.max(np.abs(4 * v**3 - 12 * t * v))
    assert sup_abs_derivative(P4, t, g) >= brute - 1e-9 * (1 + brute)
    assert sup_abs_derivative(P4, t, g) <= brute * (1 + 1e-6) + 1e-9


def test_qv_bound_saturates(P4, cone4):
    assert qv_bound(P4, cone4, 0.0) == 0.0
    b5, b20, b40 = (qv_bound(P4, cone4, t) for t in (5.0, 20.0, 40.0))
    assert b5 < b20
    assert b40 == pytest.approx(b20, rel=1e-6)
    with pytest.raises(ValidationError):
        qv_bound(P4, cone4, -1.0)


def test_neg_exp_estimate_gaussian():
    D = np.random.default_rng(2).standard_normal(50_000)
    row = neg_exp_estimate(D, 0.2, 1.0)
    assert abs(row.estimate.z_score(math.exp(0.02))) < 4
    assert row.reliable and row.flag == "OK" and row.jensen_ok
    assert row.ess > 40_000
    zero = neg_exp_estimate(D, 0.0, 1.0)
    assert zero.estimate.mean == 1.0
    with pytest.raises(ValidationError):
        neg_exp_estimate(D, 0.3, 1.0)


def test_neg_exp_unreliable_when_one_sample_dominates():
    D = np.zeros(1000)
    D[0] = -1e4
    row = neg_exp_estimate(D, 0.1, 1.0)
    assert not row.reliable and row.flag == "UNRELIABLE"
    assert row.estimate.mean == math.inf
    assert row.log_estimate == pytest.approx(1000 - math.log(1000))


def test_field_qv_below_bound(P4, cone4):
    from wickmart.gff import field_decomposition

    fd = field_decomposition(KernelDecomposition(), GridDomain(M=4), P4, cone4, 3.0, 400, seed=2)
    e = McEstimate.from_samples(fd.qv_L)
    assert e.mean <= qv_bound(P4, cone4, 3.0) + 3 * e.stderr


def test_ci_overlap():
    D = np.random.default_rng(3).standard_normal(1000)
    a = neg_exp_estimate(D, 0.1, 1.0)
    b = neg_exp_estimate(D + 50, 0.1, 2.0)
    assert ci_overlap(a, a)
    assert not ci_overlap(a, b)


def test_neg_exp_moment_grid_cap(P4):
    with pytest.raises(ValidationError):
        neg_exp_moment(0.05, [1.0], KernelDecomposition(), GridDomain(M=17), P4, 100)
    rows = neg_exp_moment(0.05, [1.0, 0.5], KernelDecomposition(), GridDomain(M=2), P4, 200, seed=1)
    assert [r.t for r in rows] == [0.5, 1.0]
