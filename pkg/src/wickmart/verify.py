"""The acceptance checks, shared by ``wickmart verify-all`` and the test suite.

Every check takes a ``scale`` that multiplies its sample sizes (the quick
profile uses 1/100) and returns a :class:`CheckResult`.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from wickmart import _rng
from wickmart.coupling import (
    drifted_hit_mc,
    envelope_decay,
    independent_coupling,
    line_hit_prob,
    linear_fit,
    lipschitz_probe,
    two_boundary_prob,
)
from wickmart.envelope import calibrate_cone, calibration_grid, cone_checks, envelope_curve, zero_envelope
from wickmart.estimators import McEstimate, ci_overlap, exp_martingale_check, mgf_curve, neg_exp_moment
from wickmart.gff import (
    GridDomain,
    KernelDecomposition,
    beta_integrability,
    divergence_trend,
    field_decomposition,
    gram_min_eig,
    k_closed_form,
    kernel_report,
    sample_field,
)
from wickmart.paths import (
    SimConfig,
    hitting_bound,
    hitting_table,
    markov_halving,
    restart_rehit,
    simulate_batch,
    sup_bound,
    sup_tail,
)
from wickmart.wickpoly import Polynomial, monomial, wick_order

log = logging.getLogger(__name__)

PROFILES = {"quick": 0.01, "full": 1.0}
INEQ_C = 1.0  # tol = INEQ_C sqrt(dt) (1 + t_max^n)


@dataclass
class CheckResult:
    id: int
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.id:>2} {self.name} ({self.seconds:.1f}s)"

    def to_json(self) -> dict:
        return {"id": self.id, "name": self.name, "passed": self.passed,
                "seconds": round(self.seconds, 3), "detail": _jsonable(self.detail)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _n(n: int, scale: float, floor: int = 100) -> int:
    return max(floor, int(round(n * scale)))


@dataclass
class Context:
    """Shared state so expensive runs are reused between checks."""

    seed: int = 0
    scale: float = 1.0
    threads: int = 1
    cache: dict = field(default_factory=dict)

    def quartic(self):
        if "x4" not in self.cache:
            P = monomial(4)
            self.cache["x4"] = (P, calibrate_cone(P, 50.0))
        return self.cache["x4"]

    def hitting_batch(self):
        if "hit" not in self.cache:
            P, cone = self.quartic()
            cfg = SimConfig(dt=1e-3, t_max=4.0, n_paths=_n(100_000, self.scale), seed=self.seed, threads=self.threads)
            self.cache["hit"] = simulate_batch(cfg, P, cone, close_excursions=False)
        return self.cache["hit"]

    def path_batch(self, t_max: float):
        key = ("paths", t_max)
        if key not in self.cache:
            P, cone = self.quartic()
            cfg = SimConfig(dt=1e-3, t_max=t_max, n_paths=_n(10_000, self.scale), seed=self.seed, threads=self.threads)
            self.cache[key] = simulate_batch(cfg, P, cone)
        return self.cache[key]


# ---------------------------------------------------------------- checks


def check_wick_centering(ctx: Context) -> CheckResult:
    P = monomial(4)
    n = _n(200_000, ctx.scale)
    rows = {}
    ok = True
    for k, t in enumerate((0.5, 1.0, 2.0)):
        z = _rng.stream(ctx.seed, k, _rng.ESTIMATORS).standard_normal(n)
        est = McEstimate.from_samples(P(math.sqrt(t) * z, t), ctx.seed)
        good = abs(est.mean) <= 4 * est.stderr
        ok &= good
        rows[t] = {"mean": est.mean, "stderr": est.stderr, "ok": good}
    return CheckResult(1, "Wick centering of P_4(B_t; t)", ok, {"n": n, "rows": rows})


def check_envelope(ctx: Context) -> CheckResult:
    P = monomial(4)
    rows = {}
    ok = True
    for t in (0.1, 1.0, 10.0, 100.0):
        f = zero_envelope(P, t)
        err = abs(f * f - (3 + math.sqrt(6)) * t)
        good = err <= 1e-9 * t
        ok &= good
        rows[t] = {"f": f, "abs_err": err, "ok": good}
    return CheckResult(2, "envelope closed form for x^4", ok, {"rows": rows})


def check_cone(ctx: Context) -> CheckResult:
    rows = {}
    ok = True
    # verify on a grid that differs from the calibration grid
    ts = np.unique(np.concatenate([np.linspace(0.0, 50.0, 25_001), calibration_grid(50.0)]))
    for name, coeffs in (("x^4", (0, 0, 0, 0, 1)), ("x^6", (0, 0, 0, 0, 0, 0, 1)), ("x^4+x^2", (0, 0, 1, 0, 1))):
        P = wick_order(Polynomial(coeffs))
        cone = calibrate_cone(P, 50.0)
        checks = cone_checks(P, cone.A, ts, envelope_curve(P, ts))
        good = all(checks.values())
        ok &= good
        rows[name] = {"A": cone.A, **checks}
    return CheckResult(3, "cone calibration on [0, 50]", ok, {"rows": rows})


def check_hitting(ctx: Context) -> CheckResult:
    batch = ctx.hitting_batch()
    rows = {}
    ok = True
    for r in hitting_table(batch, 4):
        if r.m < 2:
            continue
        good = r.mean <= r.paper_bound + 3 * r.stderr
        ok &= good
        rows[r.m] = {"mean": r.mean, "stderr": r.stderr, "bound": r.paper_bound, "ok": good}
    return CheckResult(4, "hitting-count bound", ok, {"n": len(batch), "rows": rows})


def check_markov(ctx: Context) -> CheckResult:
    batch = ctx.hitting_batch()
    P, cone = ctx.quartic()
    rows = {}
    ok = True
    restart = {}
    for m in range(1, 5):
        cfg = SimConfig(dt=1e-3, t_max=1.0, n_paths=_n(20_000, ctx.scale), seed=ctx.seed)
        restart[m] = restart_rehit(cfg, P, cone, m)
    worst = max(restart.values(), key=lambda ps: ps[0] + 3 * ps[1])
    for k in (1, 2):
        p, se, n_k = markov_halving(batch.counts, k)
        emp_ok = True if n_k == 0 else p <= 0.5 + 3 * se
        good = emp_ok and worst[0] <= 0.5 + 3 * worst[1]
        ok &= good
        rows[k] = {"p": p, "stderr": se, "n_k": n_k, "restart_p": worst[0], "restart_se": worst[1], "ok": good}
    return CheckResult(5, "Markov halving of hit counts", ok, {"rows": rows, "restart_by_m": restart})


def check_sup_tail(ctx: Context) -> CheckResult:
    rows = {}
    ok = True
    for m in (1.0, 2.0, 4.0):
        cfg = SimConfig(dt=1e-3, t_max=max(1.0, m), n_paths=_n(20_000, ctx.scale), seed=ctx.seed)
        p, se = sup_tail(cfg, m)
        b = float(sup_bound(m))
        good = p <= b + 3 * se
        ok &= good
        rows[m] = {"p": p, "stderr": se, "bound": b, "ok": good}
    return CheckResult(6, "Gaussian sup-tail bound", ok, {"rows": rows})


def check_decomposition(ctx: Context) -> CheckResult:
    P, cone = ctx.quartic()
    batch = ctx.path_batch(40.0)
    cfg = batch.cfg
    tol = INEQ_C * math.sqrt(cfg.dt) * (1 + cfg.t_max**P.n)
    frac = float(np.mean(batch.d_t >= batch.p0 + batch.d_L - batch.q - tol))
    # same inequality with the grid overshoot at each H_i charged to Q
    frac_grid = float(np.mean(batch.d_t >= batch.p0 + batch.d_L - batch.q_grid - tol))
    dH_max = float(batch.d_H.max())
    ok = frac >= 0.99 and dH_max <= tol
    return CheckResult(7, "per-path D_t >= D_L - Q and D_H <= tol", ok,
                       {"n": len(batch), "tol": tol, "fraction": frac, "fraction_grid_q": frac_grid, "d_H_max": dH_max,
                        "all_closed": bool(batch.closed.all())})


def check_line_hitting(ctx: Context) -> CheckResult:
    cfg = SimConfig(dt=1e-3, t_max=50.0, n_paths=_n(100_000, ctx.scale), seed=ctx.seed)
    up, _ = drifted_hit_mc(-0.5, cfg, upper=0.0, drift=-1.0, horizon=50.0)
    exact = line_hit_prob(-0.5)
    ok = abs(up.mean - exact) <= 3 * up.stderr
    detail = {"line": {"z": -0.5, "mc": up.mean, "stderr": up.stderr, "closed_form": exact}, "two_boundary": {}}
    L = -1.0
    cfg2 = replace(cfg, n_paths=_n(20_000, ctx.scale))
    for z in (-0.25, -0.5, -0.75):
        e = two_boundary_prob(z, L)
        _, dn = drifted_hit_mc(z, cfg2, upper=0.0, lower=L, drift=1.0)
        up2, _ = drifted_hit_mc(-z, cfg2, upper=-L, lower=0.0, drift=-1.0)
        good = abs(dn.mean - e) <= 3 * dn.stderr and abs(up2.mean - e) <= 3 * up2.stderr
        ok &= good
        detail["two_boundary"][z] = {"closed_form": e, "mc": dn.mean, "stderr": dn.stderr,
                                     "mc_mirrored": up2.mean, "stderr_mirrored": up2.stderr, "ok": good}
    return CheckResult(8, "drifted line hitting and two-boundary exit", ok, detail)


def check_tau(ctx: Context) -> CheckResult:
    P, cone = ctx.quartic()
    gaps = (0.05, 0.1, 0.2)
    ests = []
    for gap in gaps:
        cfg = SimConfig(dt=1e-3, t_max=1.0, n_paths=_n(100_000, ctx.scale), seed=ctx.seed)
        ests.append(independent_coupling(0.0, gap, cfg, P, cone).p_tau_gt_cap(ctx.seed))
    fit = linear_fit(gaps, [e.mean for e in ests], [max(e.stderr, 1e-12) for e in ests])
    ok = fit["r2"] > 0.95 and abs(fit["intercept"]) <= 2 * fit["intercept_se"]
    return CheckResult(9, "tau coupling linear through the origin", ok,
                       {"p": [e.mean for e in ests], "stderr": [e.stderr for e in ests], **fit})


def check_lipschitz(ctx: Context) -> CheckResult:
    P, cone = ctx.quartic()
    n = _n(20_000, ctx.scale)
    cfg = SimConfig(dt=1e-3, t_max=40.0, n_paths=n, seed=ctx.seed)
    consts = {}
    for t in (0.0, 1.0, 2.0):
        z = np.linspace(0.0, t + cone.A - 0.1, 7)
        pr = lipschitz_probe(t, z, cfg, P, cone)
        consts[t] = {"max_slope": pr.max_slope, "C_t": pr.growth_constant(),
                     "slopes": pr.slopes.tolist(), "slope_se": pr.slope_se.tolist()}
    C = [v["C_t"] for v in consts.values()]
    stable = max(C) <= 3 * min(C)
    dec = envelope_decay((2.0, 4.0, 8.0), cfg, P, cone)
    decreasing = dec.nonincreasing() and dec.overall_drop()
    return CheckResult(10, "Lipschitz growth and envelope-start decay", stable and decreasing,
                       {"C_t": consts, "stable": stable, "F": {float(s): [e.mean, e.stderr] for s, e in zip(dec.s, dec.F)},
                        "diffs": [[d.mean, d.stderr] for d in dec.diffs], "decreasing": decreasing})


def check_kernel(ctx: Context) -> CheckResult:
    kd = KernelDecomposition()
    u = np.arange(0.0, kd.u_max + kd.du / 2, kd.du)
    min_eig = gram_min_eig(GridDomain(M=16), u)
    rep = kernel_report(kd, 20.0)
    betas = {b: beta_integrability(kd, b, GridDomain()) for b in (0.5, 1.0, 1.99)}
    beta_ok = all(math.isfinite(r.value) and r.rel_change < 1e-6 for r in betas.values())
    trend = divergence_trend(2.0, GridDomain())
    inc = np.diff(trend)
    diverging = bool(np.all(inc > 0) and inc[-1] >= 0.9 * inc[0])
    ok = min_eig >= -1e-10 and math.isfinite(rep.c_meas) and beta_ok and diverging
    return CheckResult(11, "kernel decomposition", ok,
                       {"min_eig": min_eig, "c_meas": rep.c_meas, "window_const": rep.window_const,
                        "beta": {b: {"value": r.value, "tail": r.tail, "rel_change": r.rel_change} for b, r in betas.items()},
                        "beta2_partial": trend, "diverging": diverging})


def check_covariance(ctx: Context) -> CheckResult:
    kd = KernelDecomposition()
    dom = GridDomain(M=4)
    n = _n(10_000, ctx.scale)
    t = 2.0
    V = sample_field(kd, dom, t, n, ctx.seed).values.reshape(n, -1)
    pts = dom.points()
    worst = 0.0
    for i in range(pts.shape[0]):
        for j in range(i, pts.shape[0]):
            r = float(np.hypot(*(pts[i] - pts[j])))
            prod = V[:, i] * V[:, j]
            se = prod.std(ddof=1) / math.sqrt(n)
            worst = max(worst, abs(prod.mean() - k_closed_form(t, r)) / se)
    return CheckResult(12, "field covariance on a 4x4 grid", worst <= 4.0, {"n": n, "t": t, "max_z": worst})


def check_exp_martingale(ctx: Context) -> CheckResult:
    n = _n(1_000_000, ctx.scale)
    rows = {}
    ok = True
    for k, (lam, t) in enumerate((l, t) for l in (0.5, 1.0, 2.0) for t in (1.0, 2.0)):
        est = exp_martingale_check(lam, t, n, ctx.seed * 16 + k)
        good = abs(est.mean - 1) <= 4 * est.stderr
        ok &= good
        rows[f"{lam},{t}"] = {"mean": est.mean, "stderr": est.stderr, "ok": good}
    return CheckResult(13, "exponential martingale mean 1", ok, {"n": n, "rows": rows})


def check_concentration(ctx: Context) -> CheckResult:
    P, cone = ctx.quartic()
    n = _n(10_000, ctx.scale, floor=1000)
    fd = field_decomposition(KernelDecomposition(), GridDomain(M=8), P, cone, 4.0, n, ctx.seed)
    curve = mgf_curve(fd.d_L, np.linspace(-0.2, 0.2, 9), ctx.seed)
    fit_ok = curve.quartic_ratio < 0.2
    q20 = McEstimate.from_samples(ctx.path_batch(20.0).q, ctx.seed)
    q40 = McEstimate.from_samples(ctx.path_batch(40.0).q, ctx.seed)
    q_ok = abs(q20.mean - q40.mean) <= 3 * math.hypot(q20.stderr, q40.stderr)
    return CheckResult(14, "D_L concentration and E[Q] stability", fit_ok and q_ok,
                       {"mgf": curve.to_json(), "qv_L_mean": float(fd.qv_L.mean()),
                        "q20": q20.to_json(), "q40": q40.to_json()})


def check_negative_moment(ctx: Context) -> CheckResult:
    P = monomial(4)
    n = _n(10_000, ctx.scale)
    rows = neg_exp_moment(0.05, (2.0, 4.0, 6.0), KernelDecomposition(), GridDomain(M=16), P, n, ctx.seed)
    ess_ok = all(r.reliable for r in rows)
    overlap = ci_overlap(rows[1], rows[2])
    return CheckResult(15, "exploratory negative exponential moment", ess_ok and overlap,
                       {"exploratory": True, "rows": {r.t: {"mean": r.estimate.mean, "stderr": r.estimate.stderr,
                                                           "ess": r.ess, "flag": r.flag, "jensen_ok": r.jensen_ok}
                                                     for r in rows},
                        "ci_overlap_4_6": overlap})


CHECKS = (
    check_wick_centering, check_envelope, check_cone, check_hitting, check_markov,
    check_sup_tail, check_decomposition, check_line_hitting, check_tau, check_lipschitz,
    check_kernel, check_covariance, check_exp_martingale, check_concentration, check_negative_moment,
)


def run_check(fn, ctx: Context) -> CheckResult:
    t0 = time.perf_counter()
    res = fn(ctx)
    res.seconds = time.perf_counter() - t0
    log.info(res.line())
    return res


def run_all(profile: str = "full", seed: int = 0, threads: int = 1, only=None) -> list[CheckResult]:
    ctx = Context(seed=seed, scale=PROFILES[profile], threads=threads)
    return [run_check(fn, ctx) for i, fn in enumerate(CHECKS, 1) if only is None or i in only]
