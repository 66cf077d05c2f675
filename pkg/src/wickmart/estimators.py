"""Monte Carlo estimators: means with stderr, log-MGF curves, QV bounds, negative moments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from wickmart import _rng
from wickmart.errors import ValidationError

MIN_SAMPLES = 100
ESS_FLOOR = 50.0
OVERFLOW_EXP = 700.0


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.n < MIN_SAMPLES:
            raise ValidationError(f"need at least {MIN_SAMPLES} samples, got {self.n}")

    @classmethod
    def from_samples(cls, x, seed: int = 0) -> "McEstimate":
        x = np.asarray(x, dtype=float).ravel()
        if x.size < MIN_SAMPLES:
            raise ValidationError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
        return cls(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)), int(x.size), int(seed))

    def z_score(self, target: float) -> float:
        """``(mean - target) / stderr``; 0 when both the gap and stderr vanish."""
        gap = self.mean - target
        if self.stderr == 0:
            return 0.0 if gap == 0 else math.copysign(math.inf, gap)
        return gap / self.stderr

    def ci(self, z: float = 1.96) -> tuple[float, float]:
        return self.mean - z * self.stderr, self.mean + z * self.stderr

    def to_json(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n, "seed": self.seed}


def exp_martingale_check(lam: float, t: float, n: int, seed: int = 0) -> McEstimate:
    """MC mean of ``exp(lam B_t - lam^2 t / 2)``; exactly 1 at ``lam = 0``.

    The variance is ``exp(lam^2 t) - 1``, so the stderr grows quickly with ``lam``.
    """
    if abs(lam) > 2:
        raise ValidationError(f"|lambda| must be <= 2, got {lam}")
    if t < 0:
        raise ValidationError("t must be >= 0")
    out = np.empty(n)
    for first, count in _rng.blocks(n, 1 << 18):
        z = _rng.stream(seed, first // (1 << 18), _rng.ESTIMATORS).standard_normal(count)
        out[first : first + count] = np.exp(lam * math.sqrt(t) * z - 0.5 * lam * lam * t)
    return McEstimate.from_samples(out, seed)


def log_mean_exp(a: np.ndarray, axis=None):
    """``log(mean(exp(a)))`` with a max shift."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.mean(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else float(out.ravel()[0])


def _jackknife_lme(a: np.ndarray) -> tuple[float, float]:
    """Log-mean-exp of ``a`` and its jackknife stderr (all leave-one-out values at once)."""
    n = a.size
    m = float(a.max())
    w = np.exp(a - m)
    S = w.sum()
    full = math.log(S / n) + m
    loo = np.log(np.maximum(S - w, np.finfo(float).tiny) / (n - 1)) + m
    se = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return full, se


@dataclass
class MgfCurve:
    """``ln E[exp(alpha Y)]`` on an alpha grid with a quadratic fit through the origin."""

    alphas: np.ndarray
    log_mgf: list[McEstimate]
    quad_fit: float  # C in ln E[e^{aY}] ~ C a^2
    linear: float  # b from the diagnostic fit b a + c a^2
    residual: float  # max |ln E - C a^2|
    quartic_ratio: float  # |c4| a_max^2 / |c2| from the even part c2 a^2 + c4 a^4
    dropped: list[float] = field(default_factory=list)
    quadratic_rejected: bool = False

    @property
    def values(self) -> np.ndarray:
        return np.array([e.mean for e in self.log_mgf])

    @property
    def stderrs(self) -> np.ndarray:
        return np.array([e.stderr for e in self.log_mgf])

    def convexity_violations(self, k: float = 2.0) -> int:
        """Adjacent triples whose second difference is below ``-k`` combined stderr."""
        y, s = self.values, self.stderrs
        bad = 0
        for i in range(1, y.size - 1):
            h0, h1 = self.alphas[i] - self.alphas[i - 1], self.alphas[i + 1] - self.alphas[i]
            d2 = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0
            se = math.sqrt(s[i + 1] ** 2 / h1**2 + s[i] ** 2 * (1 / h0 + 1 / h1) ** 2 + s[i - 1] ** 2 / h0**2)
            bad += d2 < -k * se
        return bad

    def to_json(self) -> dict:
        return {
            "alphas": [float(a) for a in self.alphas],
            "log_mgf": [e.mean for e in self.log_mgf],
            "stderr": [e.stderr for e in self.log_mgf],
            "quad_fit": self.quad_fit,
            "linear": self.linear,
            "residual": self.residual,
            "quartic_ratio": self.quartic_ratio,
            "dropped": [float(a) for a in self.dropped],
            "quadratic_rejected": self.quadratic_rejected,
        }


def mgf_curve(samples, alphas, seed: int = 0) -> MgfCurve:
    """Per-alpha log-mean-exp with jackknife stderr and least-squares fits.

    ``alpha = 0`` gives exactly 0.  Alphas whose exponent exceeds ``OVERFLOW_EXP``
    after the max shift could not be represented and are dropped and listed.
    """
    y = np.asarray(samples, dtype=float).ravel()
    if y.size < 1000:
        raise ValidationError(f"need at least 1000 samples, got {y.size}")
    alphas = np.asarray(sorted(alphas), dtype=float)
    if not np.allclose(alphas, -alphas[::-1]):
        raise ValidationError("alpha grid must be symmetric about 0")
    keep, ests, dropped = [], [], []
    spread = float(y.max() - y.min())
    for a in alphas:
        if a == 0:
            keep.append(a)
            ests.append(McEstimate(0.0, 0.0, y.size, seed))
            continue
        if abs(a) * spread > OVERFLOW_EXP:
            dropped.append(float(a))
            continue
        v, se = _jackknife_lme(a * y)
        keep.append(a)
        ests.append(McEstimate(v, se, y.size, seed))
    a = np.array(keep)
    v = np.array([e.mean for e in ests])
    if not np.any(a != 0):
        return MgfCurve(a, ests, math.nan, math.nan, math.nan, math.nan, dropped, True)
    C = float(np.sum(a**2 * v) / np.sum(a**4))
    b, c = np.linalg.lstsq(np.column_stack([a, a**2]), v, rcond=None)[0]
    resid = float(np.max(np.abs(v - C * a**2)))
    # even part isolates the alpha^4 term from skewness
    pos = a > 0
    ev = np.array([(v[i] + v[np.argmin(np.abs(a + a[i]))]) / 2 for i in np.flatnonzero(pos)])
    ap = a[pos]
    if ap.size >= 2:
        c2, c4 = np.linalg.lstsq(np.column_stack([ap**2, ap**4]), ev, rcond=None)[0]
        ratio = abs(c4) * ap.max() ** 2 / abs(c2) if c2 != 0 else math.inf
    else:
        ratio = math.nan
    noise = float(np.max([e.stderr for e in ests]))
    rejected = abs(C) * np.max(a**2) <= max(noise, 1e-12 * max(1.0, abs(b) * np.max(np.abs(a))))
    return MgfCurve(a, ests, C, float(b), resid, float(ratio), dropped, bool(rejected))


# ---------------------------------------------------------------- QV bound


def rect_autocorrelation(s: float, side: float) -> float:
    """``int_0^a int_0^a exp(-s (x - y)^2 / 2) dx dy`` in closed form (``s > 0``)."""
    a = side
    r = math.sqrt(s / 2)
    return 2 * (a * math.sqrt(math.pi / (2 * s)) * math.erf(a * r) + math.expm1(-s * a * a / 2) / s)


def pair_integral(u: float, sides: tuple[float, float]) -> float:
    """``int int Q_u(x, y) dx dy`` over the rectangle; factorises by axis."""
    s = math.exp(2 * u)
    return rect_autocorrelation(s, sides[0]) * rect_autocorrelation(s, sides[1])


def sup_abs_derivative(P, t: float, g: float) -> float:
    """``max_{|v| <= g} |dP/dx(v; t)|`` from the endpoints and the critical points."""
    c = np.polynomial.polynomial.polyder(P.coeffs_at(t))
    cand = [-g, g]
    for r in np.polynomial.polynomial.polyroots(np.polynomial.polynomial.polyder(c)):
        if abs(r.imag) <= 1e-9 * (1 + abs(r.real)) and abs(r.real) <= g:
            cand.append(r.real)
    return float(np.max(np.abs(np.polynomial.polynomial.polyval(np.array(cand), c))))


def qv_bound(P, cone, t: float, sides=(1.0, 1.0)) -> float:
    """Upper bound on the LOW-constrained quadratic variation of ``D_L`` up to ``t``.

    ``int_0^t sup_{|v| <= g(s)} |P'(v; s)|^2 int int Q_s(x, y) dx dy ds``, with
    the pair integral in closed form.  Grid-pair sums are not used: on a fixed
    grid the diagonal pairs contribute ``da`` per unit scale however large
    ``s`` is, so they would not show the decay that makes the bound finite.
    """
    if t < 0:
        raise ValidationError("t must be >= 0")
    if t == 0:
        return 0.0
    f = lambda s: sup_abs_derivative(P, s, s + cone.A) ** 2 * pair_integral(s, sides)  # noqa: E731
    val, _ = integrate.quad(f, 0.0, t, limit=500, epsabs=0.0, epsrel=1e-10)
    return float(val)


# ---------------------------------------------------------------- negative moments


@dataclass(frozen=True)
class NegMomentRow:
    t: float
    estimate: McEstimate
    log_estimate: float
    ess: float
    reliable: bool
    mean_D: float
    jensen_ok: bool

    @property
    def flag(self) -> str:
        return "OK" if self.reliable else "UNRELIABLE"

    def ci(self, z: float = 1.96) -> tuple[float, float]:
        return self.estimate.ci(z)


def neg_exp_estimate(D, alpha: float, t: float, seed: int = 0) -> NegMomentRow:
    """``E[exp(-alpha D)]`` from samples of ``D`` with ESS and a Jensen sanity check."""
    if not 0 <= alpha <= 0.2:
        raise ValidationError(f"alpha must lie in [0, 0.2], got {alpha}")
    D = np.asarray(D, dtype=float).ravel()
    if alpha == 0:
        est = McEstimate(1.0, 0.0, D.size, seed)
        return NegMomentRow(t, est, 0.0, float(D.size), True, float(D.mean()), True)
    a = -alpha * D
    m = float(a.max())
    w = np.exp(a - m)
    lme = math.log(w.mean()) + m
    ess = float(w.sum() ** 2 / np.sum(w**2))
    # stderr of the mean of exp(a), computed on the shifted scale
    sd = float(w.std(ddof=1))
    log_se = math.log(sd) - 0.5 * math.log(D.size) + m if sd > 0 else -math.inf
    mean, se = _exp_or_inf(lme), _exp_or_inf(log_se)
    est = McEstimate(mean, se, D.size, seed)
    jensen = mean >= math.exp(-alpha * float(D.mean())) - 3 * se
    reliable = ess >= ESS_FLOOR and math.isfinite(mean) and math.isfinite(se)
    return NegMomentRow(t, est, lme, ess, reliable, float(D.mean()), bool(jensen))


def _exp_or_inf(x: float) -> float:
    return math.exp(x) if x < OVERFLOW_EXP else math.inf


def ci_overlap(a: NegMomentRow, b: NegMomentRow, z: float = 1.96) -> bool:
    lo1, hi1 = a.ci(z)
    lo2, hi2 = b.ci(z)
    return lo1 <= hi2 and lo2 <= hi1


def neg_exp_moment(alpha: float, t_list, kd, domain, P, n: int, seed: int = 0) -> list[NegMomentRow]:
    """Field-level ``E[exp(-alpha D_t)]`` at each ``t`` (one field path per replica).

    Exploratory: finiteness at desk-scale ``t`` says nothing about ``t -> inf``.
    """
    from wickmart.gff import field_functional_path

    if domain.M > 16:
        raise ValidationError("grid must be at most 16 x 16")
    t_list = sorted(float(t) for t in t_list)
    D = field_functional_path(kd, domain, P, t_list, n, seed)
    return [neg_exp_estimate(D[:, k], alpha, t, seed) for k, t in enumerate(t_list)]

