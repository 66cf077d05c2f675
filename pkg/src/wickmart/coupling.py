"""Brownian couplings behind the Lipschitz bound on the Doob martingale of Q.

Two constructions are simulated:

* independent-until-meeting: ``B1`` from ``z1`` and ``B2`` from ``z2`` move
  independently until they meet at ``tau`` and together afterwards;
* parallel: ``B2 = B1 + (z2 - z1)`` for all times.

Barriers are time-shifted by the offset ``t``: the envelope at ``f_R(t + s)``
and the cone at ``g(t + s)``.  Meeting of independent motions and drifted
line hits are detected with a Brownian-bridge crossing test, so the meeting
law does not depend on the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from wickmart import _rng
from wickmart.envelope import ConeConfig, envelope_curve, zero_envelope
from wickmart.errors import ValidationError
from wickmart.estimators import McEstimate
from wickmart.paths import CHUNK, SimConfig, _machine
from wickmart.wickpoly import WickPolynomial

BLOCK = 4096
LINE_FLOOR = -0.5 * math.log(1e9)  # below this level the line is reached w.p. < 1e-9


@lru_cache(maxsize=64)
def _shifted(P: WickPolynomial, A: float, t0: float, dt: float, count: int):
    t = t0 + dt * np.arange(count)
    g = t + A
    return t, envelope_curve(P, t), g, P(g, t)


def _check_inside(z, t, cone: ConeConfig):
    if abs(z) >= t + cone.A:
        raise ValidationError(f"start {z} is not inside the cone at time {t} (g = {t + cone.A})")


@dataclass(frozen=True)
class CouplingResult:
    """One replica.  ``None`` marks an event that did not happen before the horizon."""

    tau: float | None
    T_cap: float
    S1: float | None = None
    S2: float | None = None
    S2prime: float | None = None
    H1: tuple[float | None, float | None] = (None, None)
    L1: tuple[float | None, float | None] = (None, None)
    lower_exit: bool | None = None


def _opt(x) -> float | None:
    return None if np.isnan(x) else float(x)


@dataclass
class CouplingBatch:
    kind: str
    z1: float
    z2: float
    t_offset: float
    horizon: float
    tau: np.ndarray
    H1: np.ndarray  # (2, n) first cone hit after the first envelope visit
    L1: np.ndarray  # (2, n) first envelope visit
    S1: np.ndarray | None = None
    S2: np.ndarray | None = None
    S2prime: np.ndarray | None = None
    lower_exit: np.ndarray | None = None
    B2_next: np.ndarray | None = None  # first barrier B2 meets after S1: 1 lower E, 2 lower C, 0 none
    V1: np.ndarray | None = None  # 1{S1 < horizon} P(g(t + S1))
    V2: np.ndarray | None = None
    gap_error: float = 0.0  # max |B2 - B1 - (z2 - z1)| seen (parallel only)

    def __len__(self) -> int:
        return self.tau.size

    @property
    def T_cap(self) -> np.ndarray:
        h = np.where(np.isnan(self.H1), np.inf, self.H1)
        return np.minimum(np.minimum(h[0], h[1]), 1.0)

    def __getitem__(self, i: int) -> CouplingResult:
        pick = lambda a: None if a is None else _opt(a[i])  # noqa: E731
        return CouplingResult(
            tau=_opt(self.tau[i]),
            T_cap=float(self.T_cap[i]),
            S1=pick(self.S1),
            S2=pick(self.S2),
            S2prime=pick(self.S2prime),
            H1=(_opt(self.H1[0, i]), _opt(self.H1[1, i])),
            L1=(_opt(self.L1[0, i]), _opt(self.L1[1, i])),
            lower_exit=None if self.lower_exit is None else bool(self.lower_exit[i]),
        )

    def p_tau_gt_cap(self, seed: int = 0) -> McEstimate:
        """``P[tau > T_cap]``; no meeting before the horizon counts as ``tau > T_cap``."""
        ev = np.isnan(self.tau) | (self.tau > self.T_cap)
        return McEstimate.from_samples(ev.astype(float), seed)


def _first_true(mask: np.ndarray, start: np.ndarray | None = None) -> np.ndarray:
    """First row index where ``mask`` holds (at or after ``start``); -1 if none."""
    if start is not None:
        rows = np.arange(mask.shape[0])[:, None]
        mask = mask & (rows >= start[None, :])
    idx = np.argmax(mask, axis=0)
    return np.where(mask[idx, np.arange(mask.shape[1])], idx, -1)


def _first_visits(vals, f, g, phase, L1, H1, row0, dt):
    """Track the first envelope visit then the first cone hit, column-wise.

    ``phase`` 0: waiting for ``|B| <= f``; 1: waiting for ``|B| >= g``; 2: done.
    """
    absv = np.abs(vals)
    inE = absv <= f[:, None]
    hitC = absv >= g[:, None]
    start = np.zeros(vals.shape[1], dtype=int)
    w0 = phase == 0
    if w0.any():
        r = _first_true(inE)
        got = w0 & (r >= 0)
        L1[got] = (row0 + r[got]) * dt
        phase[got] = 1
        start[got] = r[got]
    w1 = (phase == 1) & ~(w0 & (start < 0))
    if w1.any():
        r = _first_true(hitC, start)
        got = w1 & (r >= 0)
        H1[got] = (row0 + r[got]) * dt
        phase[got] = 2


def independent_coupling(
    z1: float,
    z2: float,
    cfg: SimConfig,
    P: WickPolynomial,
    cone: ConeConfig,
    t_offset: float = 0.0,
    horizon: float = 1.0,
) -> CouplingBatch:
    """``cfg.n_paths`` replicas of the independent-until-meeting coupling on ``[0, horizon]``.

    ``horizon = 1`` suffices for ``tau`` versus ``T_cap = min(H1^1, H1^2, 1)``.
    """
    if z1 > z2:
        raise ValidationError("need z1 <= z2")
    _check_inside(z1, t_offset, cone)
    _check_inside(z2, t_offset, cone)
    dt = cfg.dt
    sq = math.sqrt(dt)
    N = int(round(horizon / dt))
    t, f, g, _ = _shifted(P, float(cone.A), float(t_offset), dt, N + 1)
    n = cfg.n_paths
    tau = np.full(n, np.nan)
    H1 = np.full((2, n), np.nan)
    L1 = np.full((2, n), np.nan)
    for first, count in _rng.blocks(n, BLOCK):
        sl = slice(first, first + count)
        blk = _rng.StreamBlock(cfg.seed, _rng.COUPLING, first, count)
        b1 = np.full(count, float(z1))
        b2 = np.full(count, float(z2))
        met = np.full(count, z1 == z2)
        tau_b = np.where(met, 0.0, np.nan)
        ph = [np.zeros(count, dtype=int), np.zeros(count, dtype=int)]
        h1, l1 = H1[:, sl], L1[:, sl]
        for s in range(0, N, CHUNK):
            Lc = min(CHUNK, N - s)
            dB1 = blk.normals(Lc) * sq
            dB2 = blk.normals(Lc) * sq
            U = blk.uniforms(Lc)
            B1 = b1 + np.cumsum(dB1, axis=0)
            B2 = b2 + np.cumsum(dB2, axis=0)
            D0 = np.vstack([b2 - b1, (B2 - B1)[:-1]])
            D1 = B2 - B1
            with np.errstate(over="ignore"):
                cross = (D1 <= 0) | (U < np.exp(-np.maximum(D0 * D1, 0.0) / dt))
            cross &= ~met[None, :]
            r = _first_true(cross)
            newly = r >= 0
            tau_b[newly] = (s + r[newly] + 1) * dt
            rows = np.arange(Lc)[:, None]
            merged = met[None, :] | (newly[None, :] & (rows >= r[None, :]))
            B2 = np.where(merged, B1, B2)
            met |= newly
            last = s + Lc == N
            for k, (b, B) in enumerate(((b1, B1), (b2, B2))):
                pts = np.vstack([b, B if last else B[:-1]])
                rows_t = slice(s, s + pts.shape[0])
                _first_visits(pts, f[rows_t], g[rows_t], ph[k], l1[k], h1[k], s, dt)
            b1, b2 = B1[-1], B2[-1]
        tau[sl] = tau_b
    return CouplingBatch("independent", z1, z2, t_offset, horizon, tau, H1, L1)


def parallel_exit(
    z1: float,
    z2: float,
    cfg: SimConfig,
    P: WickPolynomial,
    cone: ConeConfig,
    t_offset: float = 0.0,
    horizon: float | None = None,
) -> CouplingBatch:
    """Parallel coupling ``B2 = B1 + (z2 - z1)``: cone hits ``S1``, ``S2`` and ``S2'``.

    ``S2'`` is the first time after ``S1`` that ``B2`` climbs back to the lower
    envelope branch ``-f_R(t + s)``; ``B2_next`` records whether, after ``S1``,
    ``B2`` first meets the lower envelope (1) or the lower cone (2).
    """
    if z1 > z2:
        raise ValidationError("need z1 <= z2")
    _check_inside(z1, t_offset, cone)
    _check_inside(z2, t_offset, cone)
    horizon = cfg.t_max if horizon is None else horizon
    dt = cfg.dt
    sq = math.sqrt(dt)
    N = int(round(horizon / dt))
    t, f, g, cone_p = _shifted(P, float(cone.A), float(t_offset), dt, N + 1)
    gap = float(z2 - z1)
    n = cfg.n_paths
    out = {k: np.full(n, np.nan) for k in ("S1", "S2", "S2p")}
    lower = np.zeros(n, dtype=bool)
    nxt = np.zeros(n, dtype=np.int8)
    gap_err = 0.0
    for first, count in _rng.blocks(n, BLOCK):
        sl = slice(first, first + count)
        blk = _rng.StreamBlock(cfg.seed, _rng.COUPLING, first, count)
        b1 = np.full(count, float(z1))
        S1, S2, S2p = out["S1"][sl], out["S2"][sl], out["S2p"][sl]
        low, nx = lower[sl], nxt[sl]
        for s in range(0, N + 1, CHUNK):
            Lc = min(CHUNK, N + 1 - s)
            rows_t = slice(s, s + Lc)
            # grid values at points s .. s + Lc - 1
            dB = blk.normals(Lc) * sq
            dB[0] = 0.0 if s == 0 else dB[0]
            pts1 = b1 + np.cumsum(dB, axis=0)
            pts2 = pts1 + gap
            gap_err = max(gap_err, float(np.max(np.abs((pts2 - pts1) - gap))))
            gg, ff = g[rows_t, None], f[rows_t, None]
            for S, pts, is1 in ((S1, pts1, True), (S2, pts2, False)):
                todo = np.isnan(S)
                r = _first_true(np.abs(pts) >= gg)
                got = todo & (r >= 0)
                S[got] = (s + r[got]) * dt
                if is1:
                    low[got] = pts1[r[got], np.flatnonzero(got)] < 0
            # S2' and the first barrier for B2 after S1 (only where S1 < S2)
            pend = ~np.isnan(S1) & (np.isnan(S2) | (S2 > S1)) & (nx == 0)
            if pend.any():
                rows = (s + np.arange(Lc))[:, None] * dt
                after = rows > S1[None, :]
                upE = after & (pts2 >= -ff)
                dnC = after & (pts2 <= -gg)
                rE = _first_true(upE)
                rC = _first_true(dnC)
                e_ok = pend & (rE >= 0) & ((rC < 0) | (rE <= rC))
                c_ok = pend & (rC >= 0) & ~e_ok
                nx[e_ok] = 1
                nx[c_ok] = 2
            sp = ~np.isnan(S1) & np.isnan(S2p)
            if sp.any():
                rows = (s + np.arange(Lc))[:, None] * dt
                r = _first_true((rows > S1[None, :]) & (pts2 >= -ff))
                got = sp & (r >= 0)
                S2p[got] = (s + r[got]) * dt
            b1 = pts1[-1]
    S1, S2 = out["S1"], out["S2"]
    V = []
    for S in (S1, S2):
        idx = np.where(np.isnan(S), 0, np.rint(np.nan_to_num(S) / dt)).astype(int)
        V.append(np.where(np.isnan(S), 0.0, cone_p[idx]))
    nan2 = np.full((2, n), np.nan)
    return CouplingBatch(
        "parallel", z1, z2, t_offset, horizon,
        tau=np.where(gap == 0, 0.0, np.full(n, np.nan)), H1=nan2, L1=nan2.copy(),
        S1=S1, S2=S2, S2prime=out["S2p"], lower_exit=lower, B2_next=nxt,
        V1=V[0], V2=V[1], gap_error=gap_err,
    )


def line_hit_prob(z: float) -> float:
    """``P_z[exists s: B_s = s] = exp(2 z)`` for ``z <= 0``.

    Solves ``u'' - 2u' = 0`` with ``u(0) = 1``, ``u(-inf) = 0``.
    """
    if z > 0:
        raise ValidationError(f"z must be <= 0, got {z}")
    return math.exp(2.0 * z)


def two_boundary_prob(z: float, L: float) -> float:
    """Probability that ``B_s - s`` started at ``z`` reaches ``L < 0`` before 0.

    ``u(z) = (1 - exp(-2z)) / (1 - exp(-2L))``, so ``u(0) = 0`` and ``u(L) = 1``.
    """
    if L >= 0:
        raise ValidationError(f"L must be < 0, got {L}")
    if not L <= z <= 0:
        raise ValidationError(f"z must lie in [L, 0] = [{L}, 0], got {z}")
    return math.expm1(-2.0 * z) / math.expm1(-2.0 * L)


def two_boundary_slope_bound(L: float) -> float:
    """Constant ``C = 2 / (1 - exp(-2|L|))`` with ``|u(z)| <= C |z|``."""
    return 2.0 / -math.expm1(-2.0 * abs(L))


def _bridge_cross(y0, y1, level, dt, u, sigma2=1.0):
    """Did a Brownian bridge from ``y0`` to ``y1`` over ``dt`` touch ``level``?"""
    a, b = y0 - level, y1 - level
    prod = np.maximum(a * b, 0.0)
    with np.errstate(over="ignore"):
        return (a * b <= 0) | (u < np.exp(-2.0 * prod / (sigma2 * dt)))


def drifted_hit_mc(
    z: float,
    cfg: SimConfig,
    upper: float = 0.0,
    lower: float | None = None,
    drift: float = -1.0,
    horizon: float = 50.0,
) -> tuple[McEstimate, McEstimate]:
    """Exit law of ``Y_s = z + drift * s + W_s`` from ``(lower, upper)``.

    Returns estimates of ``P[hit upper first]`` and ``P[hit lower first]``
    (both counted only before ``horizon``).  With ``lower=None`` and
    ``drift < 0`` a path is dropped once it falls below ``upper + LINE_FLOOR``,
    where it can reach ``upper`` with probability below 1e-9.
    """
    if not (lower is None or lower < z) or not z < upper:
        raise ValidationError("start must lie strictly between the barriers")
    dt = cfg.dt
    sq = math.sqrt(dt)
    N = int(round(horizon / dt))
    n = cfg.n_paths
    up = np.zeros(n)
    dn = np.zeros(n)
    floor = upper + LINE_FLOOR if (lower is None and drift < 0) else -np.inf
    for first, count in _rng.blocks(n, BLOCK):
        blk = _rng.StreamBlock(cfg.seed, _rng.LINE, first, count)
        y = np.full(count, float(z))
        alive = np.ones(count, dtype=bool)
        hit_up = np.zeros(count)
        hit_dn = np.zeros(count)
        step = 0
        while step < N and alive.any():
            Lc = min(CHUNK, N - step)
            act = np.flatnonzero(alive)
            # streams are per path, so finished paths can simply stop drawing
            Z = blk.normals(Lc, act)
            U = blk.uniforms(Lc, act)
            V = blk.uniforms(Lc, act)
            Y = y[act] + np.cumsum(drift * dt + sq * Z, axis=0)
            Y0 = np.vstack([y[act], Y[:-1]])
            cu = _bridge_cross(Y0, Y, upper, dt, U)
            ru = _first_true(cu)
            ru = np.where(ru < 0, Lc, ru)
            if lower is not None:
                cd = _bridge_cross(Y0, Y, lower, dt, V)
                rd = _first_true(cd)
                rd = np.where(rd < 0, Lc, rd)
            else:
                rd = np.full(act.size, Lc)
            fl = _first_true(Y < floor) if np.isfinite(floor) else np.full(act.size, -1)
            fl = np.where(fl < 0, Lc, fl)
            ends_up = (ru < Lc) & (ru <= rd) & (ru <= fl)
            ends_dn = (rd < Lc) & (rd < ru) & (rd <= fl)
            ends_fl = (fl < Lc) & ~ends_up & ~ends_dn
            hit_up[act[ends_up]] = 1.0
            hit_dn[act[ends_dn]] = 1.0
            done = ends_up | ends_dn | ends_fl
            alive[act[done]] = False
            y[act] = Y[-1]
            step += Lc
        up[first : first + count] = hit_up
        dn[first : first + count] = hit_dn
    return McEstimate.from_samples(up, cfg.seed), McEstimate.from_samples(dn, cfg.seed)


@dataclass
class LipschitzProbe:
    t: float
    z: np.ndarray
    F: list[McEstimate]
    slopes: np.ndarray  # |F(z_{k+1}) - F(z_k)| / (z_{k+1} - z_k)
    slope_se: np.ndarray

    @property
    def max_slope(self) -> float:
        return float(np.max(self.slopes))

    def growth_constant(self) -> float:
        """``max slope / exp(t / 2)``."""
        return self.max_slope / math.exp(self.t / 2)


def _high_value_sums(z_grid, t, cfg, P, cone, horizon, start_high, stream_domain=_rng.COUPLING):
    """Per-replica ``sum_i P(g(t + H_i))`` for every start in ``z_grid`` (common noise)."""
    dt = cfg.dt
    sq = math.sqrt(dt)
    N = int(round(horizon / dt))
    tt, f, g, cone_p = _shifted(P, float(cone.A), float(t), dt, N + 1)
    z_grid = np.asarray(z_grid, dtype=float)
    n = cfg.n_paths
    out = np.zeros((z_grid.size, n))
    for first, count in _rng.blocks(n, BLOCK):
        blk = _rng.StreamBlock(cfg.seed, stream_domain, first, count)
        w = np.zeros(count)
        high = np.full((z_grid.size, count), start_high)
        acc = out[:, first : first + count]
        for s in range(0, N + 1, CHUNK):
            Lc = min(CHUNK, N + 1 - s)
            dB = blk.normals(Lc) * sq
            if s == 0:
                dB[0] = 0.0
            W = w + np.cumsum(dB, axis=0)
            gg, ff = g[s : s + Lc], f[s : s + Lc]
            for k, z in enumerate(z_grid):
                absv = np.abs(W + z)
                hitC = absv >= gg[:, None]
                anyhit = hitC.any(axis=0)
                quiet = ~anyhit
                entered = (absv <= ff[:, None]).any(axis=0)
                high[k, quiet] &= ~entered[quiet]
                for j in np.flatnonzero(anyhit):
                    _, Hs, _, high[k, j] = _machine(absv[:, j], gg, ff, bool(high[k, j]))
                    if Hs:
                        acc[k, j] += cone_p[s + np.asarray(Hs)].sum()
            w = W[-1]
    return out


def lipschitz_probe(
    t: float,
    z_grid,
    cfg: SimConfig,
    P: WickPolynomial,
    cone: ConeConfig,
    horizon: float | None = None,
    start: str = "high",
) -> LipschitzProbe:
    """Estimate ``F(z) = E_z[sum_i 1{H_i < inf} P(g(t + H_i))]`` on ``z_grid``.

    The hit sequence first waits for the envelope, then the cone, and so on
    (``start="high"``); ``start="low"`` counts the first cone hit directly.
    All grid points share the same Brownian increments.
    """
    z = np.asarray(sorted(z_grid), dtype=float)
    for zz in z:
        _check_inside(zz, t, cone)
    horizon = cfg.t_max if horizon is None else horizon
    if start not in ("high", "low"):
        raise ValidationError("start must be 'high' or 'low'")
    Y = _high_value_sums(z, t, cfg, P, cone, horizon, start == "high")
    F = [McEstimate.from_samples(y, cfg.seed) for y in Y]
    dz = np.diff(z)
    dY = np.diff(Y, axis=0)
    slopes = np.abs(dY.mean(axis=1)) / dz
    se = dY.std(axis=1, ddof=1) / math.sqrt(Y.shape[1]) / dz
    return LipschitzProbe(float(t), z, F, slopes, se)


def envelope_start_value(s: float, cfg: SimConfig, P: WickPolynomial, cone: ConeConfig, horizon=None) -> McEstimate:
    """``F(f_R(s))`` at time offset ``s``: the high-value sum started on the envelope."""
    return envelope_decay([s], cfg, P, cone, horizon).F[0]


@dataclass
class EnvelopeDecay:
    s: np.ndarray
    F: list[McEstimate]
    diffs: list[McEstimate]  # paired F(s_{k+1}) - F(s_k)

    def nonincreasing(self, k: float = 2.0) -> bool:
        """No consecutive increase beyond ``k`` paired stderrs."""
        return all(d.mean <= k * d.stderr for d in self.diffs)

    def overall_drop(self, k: float = 2.0) -> bool:
        """``F(s_last) < F(s_first)`` by more than ``k`` paired stderrs."""
        return self.total.mean < -k * self.total.stderr

    total: McEstimate | None = None


def envelope_decay(s_list, cfg: SimConfig, P: WickPolynomial, cone: ConeConfig, horizon=None) -> EnvelopeDecay:
    """``F(f_R(s))`` for several offsets on common Brownian increments."""
    horizon = cfg.t_max if horizon is None else horizon
    s_arr = np.asarray(sorted(s_list), dtype=float)
    if np.any(s_arr <= 0):
        raise ValidationError("offsets must be > 0")
    Y = np.vstack([_high_value_sums([zero_envelope(P, s)], s, cfg, P, cone, horizon, True)[0] for s in s_arr])
    F = [McEstimate.from_samples(y, cfg.seed) for y in Y]
    diffs = [McEstimate.from_samples(d, cfg.seed) for d in np.diff(Y, axis=0)]
    total = McEstimate.from_samples(Y[-1] - Y[0], cfg.seed) if len(Y) > 1 else None
    return EnvelopeDecay(s_arr, F, diffs, total)


def linear_fit(x, y, se) -> dict:
    """Weighted least squares ``y = a + b x`` with R^2 and the intercept's stderr."""
    x, y, se = (np.asarray(v, dtype=float) for v in (x, y, se))
    w = 1.0 / np.maximum(se, 1e-300) ** 2
    X = np.column_stack([np.ones_like(x), x])
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    a, b = cov @ (X.T @ (w * y))
    resid = y - (a + b * x)
    ybar = np.sum(w * y) / np.sum(w)
    r2 = 1.0 - np.sum(w * resid**2) / np.sum(w * (y - ybar) ** 2)
    return {"intercept": float(a), "slope": float(b), "intercept_se": float(math.sqrt(cov[0, 0])),
            "slope_se": float(math.sqrt(cov[1, 1])), "r2": float(r2)}
