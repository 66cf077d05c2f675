import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wickmart import ValidationError
from wickmart.coupling import (
    _bridge_cross,
    drifted_hit_mc,
    envelope_decay,
    independent_coupling,
    line_hit_prob,
    linear_fit,
    lipschitz_probe,
    parallel_exit,
    two_boundary_prob,
    two_boundary_slope_bound,
)
from wickmart.paths import SimConfig


def test_line_hit_closed_form():
    assert line_hit_prob(0.0) == 1.0
    assert line_hit_prob(-0.5) == pytest.approx(math.exp(-1.0), rel=1e-15)
    with pytest.raises(ValidationError):
        line_hit_prob(0.1)


@settings(max_examples=200)
@given(st.floats(-3.0, -1e-3), st.floats(0.0, 1.0))
def test_two_boundary_bounded_by_linear_slope(L, frac):
    z = L * frac
    u = two_boundary_prob(z, L)
    assert -1e-15 <= u <= 1 + 1e-15
    assert abs(u) <= two_boundary_slope_bound(L) * abs(z) + 1e-12


def test_two_boundary_boundary_values_and_ode():
    L = -1.0
    assert two_boundary_prob(0.0, L) == 0.0
    assert two_boundary_prob(L, L) == pytest.approx(1.0)
    # harmonic for the generator u''/2 + u' of the drift +1 motion
    h = 1e-4
    for z in (-0.2, -0.5, -0.8):
        up, u0, um = (two_boundary_prob(z + d, L) for d in (h, 0.0, -h))
        d1 = (up - um) / (2 * h)
        d2 = (up - 2 * u0 + um) / h**2
        assert d2 == pytest.approx(-2 * d1, rel=1e-4)
    with pytest.raises(ValidationError):
        two_boundary_prob(-0.5, 0.0)
    with pytest.raises(ValidationError):
        two_boundary_prob(-1.5, -1.0)


def test_bridge_cross():
    u = np.array([0.5])
    assert _bridge_cross(np.array([-1.0]), np.array([1.0]), 0.0, 1e-3, u)[0]
    # far from the level the bridge almost never touches it
    assert not _bridge_cross(np.array([-1.0]), np.array([-1.0]), 0.0, 1e-3, u)[0]
    # same endpoints at the level: certain touch
    assert _bridge_cross(np.array([0.0]), np.array([-1.0]), 0.0, 1e-3, u)[0]


def test_drifted_line_mc_matches_closed_form():
    up, dn = drifted_hit_mc(-0.5, SimConfig(dt=1e-3, n_paths=4000, seed=3))
    assert abs(up.mean - math.exp(-1)) <= 4 * up.stderr
    assert dn.mean == 0.0


def test_drifted_two_boundary_mc():
    # drift +1 toward 0 from z in (L, 0): chance to reach L first
    up, dn = drifted_hit_mc(-0.5, SimConfig(dt=1e-3, n_paths=4000, seed=4), upper=0.0, lower=-1.0, drift=1.0)
    assert abs(dn.mean - two_boundary_prob(-0.5, -1.0)) <= 4 * dn.stderr
    assert up.mean + dn.mean == pytest.approx(1.0, abs=1e-3)


def test_drifted_validation():
    with pytest.raises(ValidationError):
        drifted_hit_mc(0.5, SimConfig(n_paths=100))
    with pytest.raises(ValidationError):
        drifted_hit_mc(-2.0, SimConfig(n_paths=100), lower=-1.0)


def test_coupling_validation(P4, cone4):
    cfg = SimConfig(dt=1e-3, n_paths=100)
    with pytest.raises(ValidationError):
        independent_coupling(0.5, 0.1, cfg, P4, cone4)
    with pytest.raises(ValidationError):
        independent_coupling(0.0, 3.5, cfg, P4, cone4)
    with pytest.raises(ValidationError):
        parallel_exit(0.2, 0.1, cfg, P4, cone4)


def test_independent_coupling_basics(P4, cone4):
    cfg = SimConfig(dt=1e-3, n_paths=400, seed=1)
    b = independent_coupling(0.0, 0.1, cfg, P4, cone4)
    assert len(b) == 400
    met = ~np.isnan(b.tau)
    assert met.mean() > 0.5
    assert np.all(b.tau[met] >= 0) and np.all(b.tau[met] <= 1.0 + 1e-12)
    assert np.all(b.T_cap <= 1.0)
    again = independent_coupling(0.0, 0.1, cfg, P4, cone4)
    np.testing.assert_array_equal(b.tau, again.tau)
    r = b[0]
    assert r.T_cap == pytest.approx(float(b.T_cap[0]))


def test_tau_probability_grows_with_gap(P4, cone4):
    cfg = SimConfig(dt=1e-3, n_paths=3000, seed=2)
    p_small = independent_coupling(0.0, 0.05, cfg, P4, cone4).p_tau_gt_cap()
    p_big = independent_coupling(0.0, 0.4, cfg, P4, cone4).p_tau_gt_cap()
    assert p_big.mean > p_small.mean
    # P[tau > T_cap] is close to erf(gap / 2) for small gaps
    assert abs(p_big.mean - math.erf(0.2)) < 0.05


def test_parallel_exit_keeps_gap(P4, cone4):
    b = parallel_exit(0.0, 0.2, SimConfig(dt=1e-3, n_paths=300, seed=5), P4, cone4, horizon=5.0)
    assert b.gap_error < 1e-12
    assert set(np.unique(b.B2_next)) <= {0, 1, 2}
    both = ~np.isnan(b.S1) & ~np.isnan(b.S2)
    assert both.any()
    assert np.all(b.V1 >= 0) and np.all(b.V2 >= 0)


def test_lipschitz_probe_shapes_and_validation(P4, cone4):
    cfg = SimConfig(dt=1e-2, n_paths=200, seed=7)
    pr = lipschitz_probe(0.0, [0.0, 1.0, 2.0], cfg, P4, cone4, horizon=3.0)
    assert pr.slopes.shape == (2,) and np.all(np.isfinite(pr.slopes))
    assert pr.growth_constant() == pr.max_slope
    with pytest.raises(ValidationError):
        lipschitz_probe(0.0, [0.0], cfg, P4, cone4, start="middle")
    with pytest.raises(ValidationError):
        lipschitz_probe(0.0, [5.0], cfg, P4, cone4)
    with pytest.raises(ValidationError):
        envelope_decay([0.0, 1.0], cfg, P4, cone4)


def test_linear_fit_recovers_line():
    x = np.array([0.05, 0.1, 0.2])
    fit = linear_fit(x, 0.5 * x, np.full(3, 0.01))
    assert fit["slope"] == pytest.approx(0.5)
    assert fit["intercept"] == pytest.approx(0.0, abs=1e-12)
    assert fit["r2"] == pytest.approx(1.0)
