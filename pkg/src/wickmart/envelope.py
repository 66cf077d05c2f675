"""Zero envelope f_R(t), the cone g(t) = t + A, and calibration of A and A'(eps).

``f_R(t)`` is the largest ``|u|`` with ``P_R(u; t) = 0`` (0 if there is no
real root), so ``P_R(.; t) > 0`` outside ``[-f_R(t), f_R(t)]``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from wickmart.errors import CalibrationError, NumericalError, ValidationError
from wickmart.wickpoly import WickPolynomial

log = logging.getLogger(__name__)

SCAN_POINTS = 1024
BISECT_TOL = 1e-12
A_SEARCH_CAP = 10_000
GRID_POINTS = 10_000


@dataclass(frozen=True)
class EnvelopeSample:
    t: float
    f: float


def _root_bound(c: np.ndarray) -> np.ndarray:
    """Fujiwara bound on root magnitudes of monic polynomials (rows of ``c``)."""
    d = c.shape[-1] - 1
    terms = [np.abs(c[..., d - k]) ** (1.0 / k) for k in range(1, d)]
    terms.append((np.abs(c[..., 0]) / 2.0) ** (1.0 / d))
    return 2.0 * np.max(np.stack(terms, axis=-1), axis=-1)


def _polyval_rows(c: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise Horner: ``c`` is (T, d+1) ascending, ``u`` is (T, K)."""
    out = np.broadcast_to(c[:, -1:], u.shape).copy()
    for k in range(c.shape[1] - 2, -1, -1):
        out *= u
        out += c[:, k : k + 1]
    return out


def _outer_root_one_side(c: np.ndarray, bound: np.ndarray) -> np.ndarray:
    """Largest nonnegative root of each row polynomial (NaN where none).

    Sign scan on [0, bound] then bisection; sign-preserving (touching) roots
    are picked up from discrete local minima that reach zero.
    """
    T = c.shape[0]
    K = SCAN_POINTS
    frac = np.linspace(0.0, 1.0, K + 1)
    u = bound[:, None] * frac[None, :]
    q = _polyval_rows(c, u)
    if np.any(q[:, -1] <= 0):
        bad = np.flatnonzero(q[:, -1] <= 0)[0]
        raise NumericalError(
            f"root bound failed to bracket: P({u[bad, -1]:.6g}) = {q[bad, -1]:.6g} <= 0"
        )
    nonpos = q <= 0
    has = nonpos.any(axis=1)
    # index of the last nonpositive grid value
    j = K - np.argmax(nonpos[:, ::-1], axis=1)
    j = np.where(has, j, 0)
    lo = np.take_along_axis(u, j[:, None], 1)[:, 0]
    hi = np.take_along_axis(u, np.minimum(j + 1, K)[:, None], 1)[:, 0]
    root = np.full(T, np.nan)

    if has.any():
        rows = np.flatnonzero(has)
        a, b, cc = lo[rows], hi[rows], c[rows]
        tol = BISECT_TOL * np.maximum(1.0, bound[rows])
        for _ in range(200):
            if np.all(b - a <= tol):
                break
            m = 0.5 * (a + b)
            qm = _polyval_rows(cc, m[:, None])[:, 0]
            left = qm <= 0
            a = np.where(left, m, a)
            b = np.where(left, b, m)
        else:
            raise NumericalError("bisection did not converge within 200 iterations")
        r = 0.5 * (a + b)
        root[rows] = _newton_polish(cc, r, a - tol, b + tol)

    # touching roots above the last sign change
    dq = np.diff(q, axis=1)
    locmin = np.zeros_like(q, dtype=bool)
    locmin[:, 1:-1] = (dq[:, :-1] <= 0) & (dq[:, 1:] >= 0)
    locmin &= u > np.where(has, root, -1.0)[:, None]
    for i in np.flatnonzero(locmin.any(axis=1)):
        for jj in np.flatnonzero(locmin[i])[::-1]:
            um = _refine_min(c[i], u[i, jj - 1], u[i, jj + 1])
            val = np.polynomial.polynomial.polyval(um, c[i])
            if val <= 1e-12 * max(1.0, np.polynomial.polynomial.polyval(abs(um), np.abs(c[i]))):
                root[i] = um
                break
    return root


def _newton_polish(c: np.ndarray, r: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    d = c.shape[1] - 1
    dc = c[:, 1:] * np.arange(1, d + 1)
    q = _polyval_rows(c, r[:, None])[:, 0]
    dq = _polyval_rows(dc, r[:, None])[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.where(dq != 0, q / dq, 0.0)
    cand = r - step
    qc = _polyval_rows(c, cand[:, None])[:, 0]
    ok = np.isfinite(cand) & (cand >= lo) & (cand <= hi) & (np.abs(qc) <= np.abs(q))
    return np.where(ok, cand, r)


def _refine_min(c: np.ndarray, a: float, b: float) -> float:
    """Local minimiser of a polynomial on [a, b] by bisection on the derivative."""
    dc = np.polynomial.polynomial.polyder(c)
    pv = np.polynomial.polynomial.polyval
    if pv(a, dc) > 0 or pv(b, dc) < 0:
        return a if pv(a, c) < pv(b, c) else b
    for _ in range(200):
        if b - a <= BISECT_TOL * max(1.0, abs(b)):
            break
        m = 0.5 * (a + b)
        if pv(m, dc) <= 0:
            a = m
        else:
            b = m
    return 0.5 * (a + b)


def envelope_curve(P: WickPolynomial, ts, chunk: int = 256) -> np.ndarray:
    """``f_R`` on an array of nonnegative times (vectorised root search)."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if np.any(ts < 0):
        raise ValidationError("envelope times must be >= 0")
    out = np.empty(ts.shape)
    flat_t, flat_o = ts.ravel(), out.ravel()
    for s in range(0, flat_t.size, chunk):
        tt = flat_t[s : s + chunk]
        c = P.coeffs_at(tt)
        bound = np.maximum(_root_bound(c) * (1 + 1e-9), 1e-12)
        flip = c * ((-1.0) ** np.arange(c.shape[1]))
        pos = _outer_root_one_side(c, bound)
        neg = _outer_root_one_side(flip, bound)
        f = np.fmax(pos, neg)
        flat_o[s : s + chunk] = np.where(np.isnan(f), 0.0, f)
    return out


def zero_envelope(P: WickPolynomial, t: float) -> float:
    """Outermost real-root magnitude of ``P_R(.; t)``; 0 when there are no real roots.

    >>> from wickmart.wickpoly import monomial
    >>> round(zero_envelope(monomial(4), 1.0), 6)
    2.334414
    """
    if not t > 0:
        raise ValidationError(f"t must be > 0, got {t}")
    return float(envelope_curve(P, [t])[0])


def calibration_grid(t_max: float, points: int = GRID_POINTS) -> np.ndarray:
    """Uniform grid on [0, t_max] plus a geometric refinement towards 0."""
    uniform = np.linspace(0.0, t_max, points)
    first = uniform[1]
    near0 = np.geomspace(first * 1e-6, first, 60)
    return np.unique(np.concatenate([uniform, near0]))


@dataclass
class ConeConfig:
    """Calibrated cone offset ``A`` and slopes ``A'(eps)`` for one polynomial."""

    A: float
    eps_table: list[tuple[float, float]] = field(default_factory=list)
    t_check_max: float = 0.0
    poly: str | None = None

    def g(self, t):
        return np.asarray(t, dtype=float) + self.A

    def a_prime(self, eps: float) -> float:
        for e, ap in self.eps_table:
            if math.isclose(e, eps):
                return ap
        raise KeyError(f"no A'(eps) stored for eps={eps}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["eps_table"] = [[e, ap] for e, ap in self.eps_table]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ConeConfig":
        return cls(
            A=float(d["A"]),
            eps_table=[(float(e), float(ap)) for e, ap in d.get("eps_table", [])],
            t_check_max=float(d.get("t_check_max", 0.0)),
            poly=d.get("poly"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ConeConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def cone_checks(P: WickPolynomial, A: float, ts: np.ndarray, f: np.ndarray) -> dict[str, bool]:
    """The three grid checks a cone offset has to pass."""
    g = ts + A
    along = P.dx(g, ts) + P.dt(g, ts)  # d/dt P(t + A; t)
    return {
        "dominates_envelope": bool(np.all(f <= g)),
        "positive": bool(np.all(P(g, ts) > 0)),
        "increasing": bool(np.all(along > 0)),
    }


def calibrate_cone(P: WickPolynomial, t_max: float, eps_list=(), points: int = GRID_POINTS) -> ConeConfig:
    """Smallest integer ``A >= 1`` passing :func:`cone_checks`, plus a margin of 1.

    Each ``A'(eps)`` is the smallest nonnegative integer with
    ``f_R(t) <= eps t + A'`` on the grid (no margin).
    """
    if not t_max > 0:
        raise ValidationError("t_max must be > 0")
    for e in eps_list:
        if not 0 < e < 1:
            raise ValidationError(f"eps must lie in (0, 1), got {e}")
    ts = calibration_grid(t_max, points)
    f = envelope_curve(P, ts)
    A = max(1, math.ceil(float(np.max(f - ts))))
    passed = []
    while A <= A_SEARCH_CAP and len(passed) < 2:
        if all(cone_checks(P, A, ts, f).values()):
            # first pass, then the first pass at or beyond first + 1
            if not passed:
                passed.append(A)
                A += 1
                continue
            passed.append(A)
            break
        A += 1
    if len(passed) < 2:
        raise CalibrationError(f"no cone offset A <= {A_SEARCH_CAP} passes the checks on [0, {t_max}]")
    table = []
    for e in eps_list:
        excess = f - e * ts
        ap = max(0, math.ceil(float(np.max(excess)) - 1e-12))
        if int(np.argmax(excess)) == ts.size - 1:
            log.warning("A'(%g) attained at the horizon t=%g; may not hold beyond it", e, t_max)
        table.append((float(e), float(ap)))
    return ConeConfig(A=float(passed[1]), eps_table=table, t_check_max=float(t_max), poly=str(P.base))


def cone_value(P: WickPolynomial, cfg: ConeConfig, t):
    """``P_R(g(t); t)`` with ``g(t) = t + A``."""
    if np.any(np.asarray(t) < 0):
        raise ValidationError("t must be >= 0")
    t = np.asarray(t, dtype=float)
    return P(t + cfg.A, t)
