import json
import math
from importlib import resources

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wickmart import NumericalError, ValidationError
from wickmart.envelope import calibrate_cone
from wickmart.gff import (
    FieldSnapshot,
    GridDomain,
    KernelDecomposition,
    _factor,
    _tail,
    beta_integrability,
    beta_partial_integral,
    divergence_trend,
    field_decomposition,
    field_functional,
    field_functional_path,
    gram_1d,
    gram_min_eig,
    gram_points,
    k_closed_form,
    k_cumulative,
    kernel_report,
    log_plus,
    sample_field,
    sample_points,
    scale_steps,
)
from wickmart.wickpoly import monomial

KD = KernelDecomposition()


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 12.0), st.floats(1e-4, 3.0))
def test_kernel_quadrature_matches_exponential_integral(t, r):
    assert k_cumulative(KD, t, r) == pytest.approx(k_closed_form(t, r), rel=1e-8, abs=1e-12)


def test_kernel_simple_values():
    assert k_cumulative(KD, 3.0, 0.0) == 3.0
    assert k_cumulative(KD, 0.0, 0.4) == 0.0
    # K_t(r) is increasing in t and decreasing in r
    ts = [k_closed_form(t, 0.1) for t in (0.5, 1.0, 2.0, 4.0)]
    assert ts == sorted(ts)
    rs = [k_closed_form(2.0, r) for r in (0.01, 0.1, 1.0)]
    assert rs == sorted(rs, reverse=True)
    assert log_plus(2.0) == 0.0 and log_plus(0.0) == math.inf
    with pytest.raises(ValidationError):
        k_cumulative(KD, -1.0, 0.1)
    with pytest.raises(ValidationError):
        KernelDecomposition(du=0.0)


def test_kernel_log_comparison_constant():
    rep = kernel_report(KD, t_max=6.0, n_t=13, n_r=30)
    assert 0.0 < rep.c_meas < 0.5
    # K_inf(r) = E1(r^2/2)/2 = ln(1/r) + (ln 2 - gamma)/2 + O(r^2)
    assert rep.window_const == pytest.approx(abs(0.5 * (math.log(2) - np.euler_gamma)), abs=0.08)


def test_gram_kronecker_structure_and_psd():
    dom = GridDomain(M=4)
    for u in (0.0, 1.5, 4.0):
        full = gram_points(dom.points(), u)
        np.testing.assert_allclose(full, np.kron(gram_1d(dom.xs, u), gram_1d(dom.ys, u)), atol=1e-14)
    assert gram_min_eig(GridDomain(M=16), np.arange(0.0, 25.0, 0.5)) >= -1e-10


def test_factor_jitter_and_failure():
    L = _factor(np.ones((2, 2)))  # singular, needs the jitter
    np.testing.assert_allclose(L @ L.T, np.ones((2, 2)), atol=1e-8)
    with pytest.raises(NumericalError):
        _factor(-np.eye(2))


def test_beta_integrability():
    dom = GridDomain()
    res = beta_integrability(KD, 1.0, dom)
    assert np.isfinite(res.value) and res.rel_change < 1e-8
    # tail expansion agrees with direct quadrature between two cut-offs
    direct = beta_partial_integral(1.0, dom, 25.0) - beta_partial_integral(1.0, dom, 15.0)
    assert direct == pytest.approx(_tail(1.0, 15.0, dom.sides) - _tail(1.0, 25.0, dom.sides), rel=1e-6)
    for bad in (0.0, 2.0, -1.0):
        with pytest.raises(ValidationError):
            beta_integrability(KD, bad, dom)


def test_beta_two_diverges_linearly():
    vals = divergence_trend(2.0, GridDomain())
    steps = np.diff(vals)
    assert np.all(steps > 0)
    # leading term 2 pi a b per unit of u
    np.testing.assert_allclose(steps / 10.0, 2 * math.pi, rtol=0.01)


def test_scale_steps_cover_interval():
    steps = scale_steps(KD, 0.125)
    assert sum(h for _, h in steps) == pytest.approx(0.125)
    assert len(steps) == 13 and steps[-1][1] == pytest.approx(0.005)
    assert scale_steps(KD, 0.0) == []


def test_domain_validation():
    with pytest.raises(ValidationError):
        GridDomain(M=0)
    with pytest.raises(ValidationError):
        GridDomain(x1=0.0)
    with pytest.raises(ValidationError):
        sample_field(KD, GridDomain(M=65), 1.0, 10)
    with pytest.raises(ValidationError):
        sample_field(KD, GridDomain(M=2), -1.0, 10)


def test_field_pointwise_variance_and_determinism():
    dom = GridDomain(M=4)
    snap = sample_field(KD, dom, 1.0, 2000, seed=3)
    v = snap.values.reshape(2000, -1)
    var = v.var(axis=0, ddof=1)
    # Q_u(0) = 1, so every point has variance t
    assert np.all(np.abs(var - 1.0) < 5 * math.sqrt(2 / 2000))
    again = sample_field(KD, dom, 1.0, 2000, seed=3, block=333)
    np.testing.assert_array_equal(snap.values, again.values)
    assert not np.array_equal(snap.values, sample_field(KD, dom, 1.0, 2000, seed=4).values)


def test_sample_points_covariance():
    pts = [[0.0, 0.0], [0.3, 0.0]]
    X = sample_points(KD, pts, 2.0, 4000, seed=1)
    c = np.cov(X.T)
    r = 0.3
    assert c[0, 1] == pytest.approx(k_closed_form(2.0, r), abs=5 * 2.0 / math.sqrt(4000))


def test_snapshot_roundtrip(tmp_path):
    snap = sample_field(KD, GridDomain(M=3), 0.5, 5, seed=2)
    data, head = snap.dump(tmp_path / "snap")
    assert data.stat().st_size == 5 * 9 * 8
    header = json.loads(head.read_text())
    schema = json.loads(resources.files("wickmart").joinpath("schemas/snapshot-header.json").read_text())
    jsonschema.validate(header, schema)
    back = FieldSnapshot.load(tmp_path / "snap")
    np.testing.assert_array_equal(back.values, snap.values)
    assert back.domain == snap.domain and back.t == 0.5 and back.seed == 2


def test_field_functional_is_centred():
    P = monomial(4)
    dom = GridDomain(M=4)
    D = field_functional(sample_field(KD, dom, 1.0, 4000, seed=5), P)
    assert abs(D.mean()) < 5 * D.std(ddof=1) / math.sqrt(D.size)
    path = field_functional_path(KD, dom, P, [0.5, 1.0], 4000, seed=5)
    # the path and the direct draw share increments
    np.testing.assert_allclose(path[:, 1], D, rtol=1e-10, atol=1e-10)
    with pytest.raises(ValidationError):
        field_functional(FieldSnapshot(1.0, np.zeros((1, 2, 2)), 0), P)


def test_field_decomposition_telescopes():
    P = monomial(4)
    cone = calibrate_cone(P, 50.0)
    fd = field_decomposition(KD, GridDomain(M=4), P, cone, 2.0, 300, seed=1)
    assert np.max(np.abs(fd.gap())) < 1e-9
    assert np.all(fd.q >= 0) and np.all(fd.qv_L >= 0)
    assert fd.p0 == 0.0
