"""Gaussian scale decomposition of a log-correlated field and its grid sampler.

The kernel family is ``Q_u(x, y) = exp(-e^{2u} |x - y|^2 / 2)``.  It has unit
diagonal, so ``K_t(x, x) = t`` exactly and ``X_t(x)`` is a standard Brownian
motion in ``t`` at every point.  For ``|x - y| = r``

    K_t(r) = int_0^t Q_u du = (E1(r^2 / 2) - E1(e^{2t} r^2 / 2)) / 2

which tends to ``ln(1/r) + (ln 2 - gamma) / 2`` as ``t -> inf`` for small ``r``.

On a rectangle grid the Gram matrix factorises as ``G_x (kron) G_y``, so a
field increment is ``L_x Z L_y^T`` with two small Cholesky factors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import integrate, special

from wickmart import _rng
from wickmart.errors import NumericalError, ValidationError
from wickmart.estimators import pair_integral
from wickmart.wickpoly import WickPolynomial

MAX_GRID = 64
PSD_TOL = 1e-10
JITTER = 1e-10
DRAW_BUDGET = 1 << 14  # normals drawn per replica per generator call


@dataclass(frozen=True)
class KernelDecomposition:
    u_max: float = 25.0
    du: float = 1e-2

    def __post_init__(self):
        if not self.du > 0 or not self.u_max > 0:
            raise ValidationError("u_max and du must be > 0")

    def Q(self, u, r):
        u = np.asarray(u, dtype=float)
        r = np.asarray(r, dtype=float)
        return np.exp(-np.exp(2 * u) * r * r / 2)


@dataclass(frozen=True)
class GridDomain:
    """``M x M`` cell midpoints of the rectangle ``[x0, x1] x [y0, y1]``."""

    M: int = 8
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 1.0
    y1: float = 1.0

    def __post_init__(self):
        if self.M < 1:
            raise ValidationError("grid size must be >= 1")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValidationError("empty rectangle")

    @property
    def sides(self) -> tuple[float, float]:
        return (self.x1 - self.x0, self.y1 - self.y0)

    @property
    def area(self) -> float:
        a, b = self.sides
        return a * b

    @property
    def cell_area(self) -> float:
        return self.area / self.M**2

    @property
    def xs(self) -> np.ndarray:
        h = (self.x1 - self.x0) / self.M
        return self.x0 + h * (np.arange(self.M) + 0.5)

    @property
    def ys(self) -> np.ndarray:
        h = (self.y1 - self.y0) / self.M
        return self.y0 + h * (np.arange(self.M) + 0.5)

    def points(self) -> np.ndarray:
        """Row-major ``(M*M, 2)`` coordinates: index ``i * M + j`` is ``(xs[i], ys[j])``."""
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])


# ---------------------------------------------------------------- kernel


def k_closed_form(t: float, r: float) -> float:
    """``K_t(r)`` through the exponential integral (used as an oracle)."""
    if r == 0:
        return float(t)
    x = r * r / 2
    return 0.5 * float(special.exp1(x) - special.exp1(math.exp(2 * t) * x))


def k_cumulative(kd: KernelDecomposition, t: float, r: float) -> float:
    """``K_t(r) = int_0^t Q_u(r) du`` by adaptive quadrature."""
    if t < 0:
        raise ValidationError("t must be >= 0")
    if r < 0:
        raise ValidationError("r must be >= 0")
    if r == 0 or t == 0:
        return float(t)
    # the integrand drops from ~1 to ~0 around u = ln(1/r)
    knee = math.log(1 / r)
    pts = [knee] if 0 < knee < t else None
    val, _ = integrate.quad(lambda u: math.exp(-math.exp(2 * u) * r * r / 2), 0.0, t,
                            points=pts, limit=400, epsabs=1e-12, epsrel=1e-12)
    return float(val)


def log_plus(r: float) -> float:
    return max(math.log(1 / r), 0.0) if r > 0 else math.inf


@dataclass
class KernelReport:
    c_meas: float  # sup |K_t(r) - min(t, ln+ 1/r)| over the grid
    argmax: tuple[float, float]
    window_const: float  # sup |K_inf(r) - ln(1/r)| over r in [e^{-t_max}, 0.5]
    t_grid: list[float] = field(default_factory=list)
    r_grid: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"c_meas": self.c_meas, "argmax": list(self.argmax), "window_const": self.window_const,
                "t_grid": self.t_grid, "r_grid": self.r_grid}


def kernel_report(kd: KernelDecomposition, t_max: float = 20.0, n_t: int = 41, n_r: int = 60) -> KernelReport:
    t_grid = np.linspace(0.0, t_max, n_t)
    r_grid = np.geomspace(math.exp(-t_max - 2), 2.0, n_r)
    best, arg = -1.0, (0.0, 0.0)
    for t in t_grid:
        for r in r_grid:
            d = abs(k_cumulative(kd, t, r) - min(t, log_plus(r)))
            if d > best:
                best, arg = d, (float(t), float(r))
    window = np.geomspace(math.exp(-t_max), 0.5, n_r)
    wc = max(abs(0.5 * special.exp1(r * r / 2) - math.log(1 / r)) for r in window)
    return KernelReport(best, arg, float(wc), [float(t) for t in t_grid], [float(r) for r in r_grid])


# ---------------------------------------------------------------- beta integrability


def _tail(beta: float, U: float, sides) -> float:
    """``int_U^inf e^{beta u} I(u) du`` using the large-u expansion of the pair integral.

    Per axis the pair integral is ``a sqrt(2 pi) e^{-u} - 2 e^{-2u}`` up to
    terms of order ``exp(-a^2 e^{2u} / 2)``.
    """
    a, b = sides
    c2, c3, c4 = 2 * math.pi * a * b, -2 * math.sqrt(2 * math.pi) * (a + b), 4.0
    out = 0.0
    for c, k in ((c2, 2), (c3, 3), (c4, 4)):
        out += c * math.exp((beta - k) * U) / (k - beta)
    return out


def beta_partial_integral(beta: float, domain: GridDomain, u_max: float) -> float:
    """``int_0^{u_max} e^{beta u} int int Q_u dx dy du`` with no tail term (any beta)."""
    val, _ = integrate.quad(lambda u: math.exp(beta * u) * pair_integral(u, domain.sides), 0.0, u_max,
                            limit=500, epsabs=0.0, epsrel=1e-12)
    return float(val)


@dataclass(frozen=True)
class BetaResult:
    beta: float
    value: float
    tail: float
    u_max: float
    rel_change: float  # between u_max = 20 and 25 (tail included)


def beta_integrability(kd: KernelDecomposition, beta: float, domain: GridDomain) -> BetaResult:
    """``int_0^inf e^{beta u} int int Q_u(x, y) dx dy du``: finite exactly when ``beta < 2``.

    The spatial part is the closed-form pair integral rather than a grid sum,
    since a fixed grid cannot resolve ``Q_u`` once ``e^{-u}`` is below its spacing.
    """
    if not 0 < beta < 2:
        raise ValidationError(f"beta must lie in (0, 2), got {beta}")
    vals = {}
    for U in (20.0, 25.0, kd.u_max):
        vals[U] = beta_partial_integral(beta, domain, U) + _tail(beta, U, domain.sides)
    rel = abs(vals[25.0] - vals[20.0]) / abs(vals[25.0])
    return BetaResult(beta, vals[kd.u_max], _tail(beta, kd.u_max, domain.sides), kd.u_max, rel)


def divergence_trend(beta: float, domain: GridDomain, u_list=(10.0, 20.0, 30.0, 40.0)) -> list[float]:
    """Partial integrals at growing cut-offs; at ``beta = 2`` they grow linearly."""
    return [beta_partial_integral(beta, domain, U) for U in u_list]


# ---------------------------------------------------------------- Gram matrices


def gram_1d(coords: np.ndarray, u: float) -> np.ndarray:
    d = coords[:, None] - coords[None, :]
    return np.exp(-math.exp(2 * u) * d * d / 2)


def gram_points(points: np.ndarray, u: float) -> np.ndarray:
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    return np.exp(-math.exp(2 * u) * d2 / 2)


def gram_min_eig(domain: GridDomain, u_grid) -> float:
    """Smallest eigenvalue of the ``M^2 x M^2`` Gram matrix over the scales.

    Eigenvalues of a Kronecker product are the pairwise products.
    """
    out = math.inf
    for u in u_grid:
        ex = np.linalg.eigvalsh(gram_1d(domain.xs, u))
        ey = np.linalg.eigvalsh(gram_1d(domain.ys, u))
        out = min(out, float(np.min(np.outer(ex, ey))))
    return out


def _factor(G: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(G + JITTER * np.eye(G.shape[0]))
    except np.linalg.LinAlgError:
        raise NumericalError("Gram factorisation failed after diagonal jitter") from None


@lru_cache(maxsize=8192)
def _factor_1d(coords: tuple, u: float) -> np.ndarray:
    return _factor(gram_1d(np.array(coords), u))


@lru_cache(maxsize=8192)
def _factor_pts(points: tuple, u: float) -> np.ndarray:
    return _factor(gram_points(np.array(points), u))


def scale_steps(kd: KernelDecomposition, t: float) -> list[tuple[float, float]]:
    """``(midpoint, width)`` of the scale steps covering ``[0, t]``."""
    n = int(math.floor(t / kd.du + 1e-9))
    steps = [((k + 0.5) * kd.du, kd.du) for k in range(n)]
    rest = t - n * kd.du
    if rest > 1e-12:
        steps.append((n * kd.du + rest / 2, rest))
    return steps


# ---------------------------------------------------------------- sampling


@dataclass
class FieldSnapshot:
    t: float
    values: np.ndarray  # (replicas, M, M)
    seed: int
    domain: GridDomain | None = None

    def dump(self, path) -> tuple[Path, Path]:
        """Write ``path.bin`` (little-endian float64, row-major) and ``path.json``."""
        base = Path(path)
        data, head = base.with_suffix(".bin"), base.with_suffix(".json")
        np.ascontiguousarray(self.values, dtype="<f8").tofile(data)
        header = {"t": self.t, "shape": list(self.values.shape), "dtype": "<f8", "order": "C",
                  "seed": self.seed, "domain": None if self.domain is None else
                  {"M": self.domain.M, "x0": self.domain.x0, "y0": self.domain.y0,
                   "x1": self.domain.x1, "y1": self.domain.y1}}
        head.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
        return data, head

    @classmethod
    def load(cls, path) -> "FieldSnapshot":
        base = Path(path)
        header = json.loads(base.with_suffix(".json").read_text())
        vals = np.fromfile(base.with_suffix(".bin"), dtype="<f8").reshape(header["shape"])
        dom = header.get("domain")
        return cls(header["t"], vals, header["seed"], GridDomain(**dom) if dom else None)


class _FieldWalker:
    """Advance a block of grid fields through the scale steps."""

    def __init__(self, domain: GridDomain, seed: int, first: int, count: int):
        self.domain = domain
        self.blk = _rng.StreamBlock(seed, _rng.FIELD, first, count)
        self.count = count
        self._buf = None
        self._pos = 0
        self.per_step = domain.M * domain.M

    def _draw(self) -> np.ndarray:
        if self._buf is None or self._pos >= self._buf.shape[0]:
            k = max(1, DRAW_BUDGET // self.per_step)
            self._buf = self.blk.normals(k * self.per_step).reshape(k, self.per_step, self.count)
            self._pos = 0
        z = self._buf[self._pos]
        self._pos += 1
        return z

    def increment(self, u: float, h: float) -> np.ndarray:
        M = self.domain.M
        Lx = _factor_1d(tuple(self.domain.xs), u)
        Ly = _factor_1d(tuple(self.domain.ys), u)
        Z = self._draw().T.reshape(self.count, M, M)
        return math.sqrt(h) * (Lx @ Z @ Ly.T)


def sample_field(kd: KernelDecomposition, domain: GridDomain, t: float, n: int, seed: int = 0,
                 block: int = 1024) -> FieldSnapshot:
    """``n`` independent replicas of ``X_t`` on the grid."""
    if domain.M > MAX_GRID:
        raise ValidationError(f"grid size {domain.M} exceeds cap {MAX_GRID}")
    if t < 0:
        raise ValidationError("t must be >= 0")
    out = np.zeros((n, domain.M, domain.M))
    steps = scale_steps(kd, t)
    for first, count in _rng.blocks(n, block):
        w = _FieldWalker(domain, seed, first, count)
        X = out[first : first + count]
        for u, h in steps:
            X += w.increment(u, h)
    return FieldSnapshot(float(t), out, seed, domain)


def sample_points(kd: KernelDecomposition, points, t: float, n: int, seed: int = 0) -> np.ndarray:
    """``X_t`` at arbitrary points, shape ``(n, k)``; full Gram factor per scale."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    key = tuple(map(tuple, pts))
    k = pts.shape[0]
    out = np.zeros((n, k))
    steps = scale_steps(kd, t)
    for first, count in _rng.blocks(n, 4096):
        blk = _rng.StreamBlock(seed, _rng.FIELD, first, count)
        Z = blk.normals(len(steps) * k).reshape(len(steps), k, count)
        X = out[first : first + count]
        for (u, h), z in zip(steps, Z):
            X += math.sqrt(h) * (_factor_pts(key, u) @ z).T
    return out


def field_functional(snapshot: FieldSnapshot, P: WickPolynomial, domain: GridDomain | None = None) -> np.ndarray:
    """Midpoint rule ``sum_i P(X_t(x_i); t) da``, one value per replica."""
    domain = domain or snapshot.domain
    if domain is None:
        raise ValidationError("a grid domain is required")
    v = P(snapshot.values, snapshot.t)
    return v.sum(axis=(-2, -1)) * domain.cell_area


def field_functional_path(kd, domain, P, t_list, n: int, seed: int = 0, block: int = 1024) -> np.ndarray:
    """``D_t`` at every ``t`` in ``t_list`` along the same field path, shape ``(n, len(t_list))``."""
    t_list = sorted(float(t) for t in t_list)
    out = np.zeros((n, len(t_list)))
    for first, count in _rng.blocks(n, block):
        w = _FieldWalker(domain, seed, first, count)
        X = np.zeros((count, domain.M, domain.M))
        done = 0.0
        for k, t in enumerate(t_list):
            for u, h in scale_steps(kd, t - done):
                X += w.increment(done + u, h)
            done = t
            out[first : first + count, k] = P(X, t).sum(axis=(1, 2)) * domain.cell_area
    return out


@dataclass
class FieldDecomposition:
    """Grid-level split of ``D_t`` along a field path (per replica)."""

    t: float
    d_t: np.ndarray
    d_L: np.ndarray  # sum over steps and LOW points of the step increment of P, times da
    d_H: np.ndarray
    q: np.ndarray  # sum over cone hits of P(g(H); H) da
    qv_L: np.ndarray  # realised quadratic variation of d_L
    p0: float  # D_0 = P(0; 0) area

    def gap(self) -> np.ndarray:
        return self.d_t - (self.p0 + self.d_L + self.d_H)


def field_decomposition(kd, domain, P, cone, t: float, n: int, seed: int = 0, block: int = 1024) -> FieldDecomposition:
    """Run the LOW/HIGH machine at every grid point along the scale steps.

    A point turns HIGH when ``|X| >= g(u)`` and LOW again when ``|X| <= f_R(u)``;
    it starts LOW at ``X_0 = 0``.
    """
    from wickmart.envelope import envelope_curve

    steps = scale_steps(kd, t)
    knots = np.concatenate([[0.0], np.cumsum([h for _, h in steps])])
    f = envelope_curve(P, knots)
    g = knots + cone.A
    Pg = P(g, knots)
    da = domain.cell_area
    cols = {k: np.zeros(n) for k in ("d_L", "d_H", "q", "qv", "d_t")}
    for first, count in _rng.blocks(n, block):
        w = _FieldWalker(domain, seed, first, count)
        X = np.zeros((count, domain.M, domain.M))
        high = np.zeros(X.shape, dtype=bool)
        dL = np.zeros(count)
        dH = np.zeros(count)
        q = np.zeros(count)
        qv = np.zeros(count)
        for k, (u, h) in enumerate(steps):
            dX = w.increment(u, h)
            P0 = P(X, knots[k])
            X += dX
            # exact step increment of P(X_u; u), which telescopes to D_t
            dP = P(X, knots[k + 1]) - P0
            incL = np.sum(np.where(high, 0.0, dP), axis=(1, 2)) * da
            dL += incL
            qv += incL * incL
            dH += np.sum(np.where(high, dP, 0.0), axis=(1, 2)) * da
            a = np.abs(X)
            hit = ~high & (a >= g[k + 1])
            back = high & (a <= f[k + 1])
            q += hit.sum(axis=(1, 2)) * Pg[k + 1] * da
            high = (high | hit) & ~back
        sl = slice(first, first + count)
        cols["d_L"][sl], cols["d_H"][sl], cols["q"][sl], cols["qv"][sl] = dL, dH, q, qv
        cols["d_t"][sl] = P(X, t).sum(axis=(1, 2)) * da
    p0 = float(P(0.0, 0.0)) * domain.area
    return FieldDecomposition(float(t), cols["d_t"], cols["d_L"], cols["d_H"], cols["q"], cols["qv"], p0)
