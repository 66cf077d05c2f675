"""Single-site Brownian paths, cone/envelope stopping times and the D_L/D_H split.

A path alternates between LOW stretches ``[L_k, H_{k+1})`` (inside the cone)
and HIGH stretches ``[H_k, L_k)`` (started by a cone hit, ended by a return
to the zero envelope).  Stopping times are detected at the first grid point
past the barrier.  ``d_L`` and ``d_H`` are Ito sums ``sum P'(B_s; s) dB_s``
over LOW and HIGH steps, so ``P(B_t; t) - P(B_0; 0) ~ d_L + d_H``.

The horizon ``t_max`` stands in for infinity.  With ``close_excursions`` a
path that is still HIGH at ``t_max`` keeps running (on its own stream) until
it returns to the envelope, so every started excursion is completed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from wickmart import _rng
from wickmart.envelope import ConeConfig, envelope_curve
from wickmart.errors import ValidationError
from wickmart.wickpoly import WickPolynomial

CHUNK = 512
BLOCK = 4096
EXTENSION_FACTOR = 4  # excursions are closed within EXTENSION_FACTOR * t_max extra time


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    t_max: float = 40.0
    n_paths: int = 10_000
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.dt <= 1e-2:
            raise ValidationError(f"dt must lie in (0, 1e-2], got {self.dt}")
        if self.t_max < 1:
            raise ValidationError(f"t_max must be >= 1, got {self.t_max}")
        if self.n_paths < 1:
            raise ValidationError("n_paths must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))


@dataclass(frozen=True)
class _Barriers:
    t: np.ndarray  # grid times
    f: np.ndarray  # envelope
    g: np.ndarray  # cone
    cone_p: np.ndarray  # P(g(t); t)


@lru_cache(maxsize=32)
def _barriers(P: WickPolynomial, A: float, dt: float, first: int, count: int) -> _Barriers:
    t = (first + np.arange(count)) * dt
    g = t + A
    return _Barriers(t, envelope_curve(P, t), g, P(g, t))


def barriers(P: WickPolynomial, cone: ConeConfig, dt: float, n_steps: int) -> _Barriers:
    """Envelope, cone and cone values on the grid ``0, dt, ..., n_steps * dt``."""
    return _barriers(P, float(cone.A), float(dt), 0, n_steps + 1)


def _machine(absb: np.ndarray, g: np.ndarray, f: np.ndarray, high: bool):
    """Run the LOW/HIGH alternation over one column of grid values.

    Returns ``(labels, H_idx, L_idx, high_at_end)``; ``labels[i]`` is True when
    step ``i`` (the state after classifying grid point ``i``) is HIGH.
    """
    hits = np.flatnonzero(absb >= g)
    ins = np.flatnonzero(absb <= f)
    labels = np.zeros(absb.size, dtype=bool)
    H, L = [], []
    pos = 0
    while True:
        if high:
            k = np.searchsorted(ins, pos)
            if k == ins.size:
                labels[pos:] = True
                break
            i = int(ins[k])
            labels[pos:i] = True
            L.append(i)
            high, pos = False, i
        else:
            k = np.searchsorted(hits, pos)
            if k == hits.size:
                break
            i = int(hits[k])
            H.append(i)
            high, pos = True, i
    return labels, H, L, high


def _horner_x(dcoef: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Evaluate a polynomial in x with per-row (time) coefficients.

    ``dcoef`` has shape (L, d+1), ``b`` shape (L, m).
    """
    out = np.broadcast_to(dcoef[:, -1:], b.shape).copy()
    for k in range(dcoef.shape[1] - 2, -1, -1):
        out *= b
        out += dcoef[:, k : k + 1]
    return out


@dataclass
class PathRecord:
    """One discretised path with its stopping times and step labels."""

    times: np.ndarray
    values: np.ndarray
    H_list: list[float]
    L_list: list[float]
    labels: np.ndarray  # per step, True = HIGH; len(values) - 1 entries
    t_max: float
    closed: bool = True  # False if an excursion was still open when the run stopped

    @property
    def high_intervals(self) -> list[tuple[float, float]]:
        ends = self.L_list + [self.times[-1]] * (len(self.H_list) - len(self.L_list))
        return list(zip(self.H_list, ends))


@dataclass
class PathFunctionals:
    d_t: float
    d_L: float
    d_H: float
    q: float
    p0: float = 0.0
    qv_L: float = 0.0

    def decomposition_gap(self) -> float:
        """``d_t - (p0 + d_L - q)``; nonnegative up to discretisation error."""
        return self.d_t - (self.p0 + self.d_L - self.q)


def _extend(gen, P, cone, dt, start_step, b, cap_steps):
    """Continue one HIGH path from ``start_step`` until it re-enters the envelope.

    Yields ``(increments, values_before, labels_high_count, L_step or None)``
    chunk by chunk; draws come from ``gen`` so the continuation is reproducible.
    """
    step = start_step
    while step - start_step < cap_steps:
        n = min(CHUNK, cap_steps - (step - start_step))
        bar = _barriers(P, float(cone.A), float(dt), step + 1, n)
        dB = gen.standard_normal(n) * math.sqrt(dt)
        vals = b + np.cumsum(dB)
        inside = np.flatnonzero(np.abs(vals) <= bar.f)
        if inside.size:
            k = int(inside[0])
            yield dB[: k + 1], np.concatenate([[b], vals[:k]]), step + k + 1, vals[k]
            return
        yield dB, np.concatenate([[b], vals[:-1]]), None, vals[-1]
        b = vals[-1]
        step += n


def simulate_path(
    cfg: SimConfig,
    P: WickPolynomial,
    cone: ConeConfig,
    index: int = 0,
    values: np.ndarray | None = None,
    close_excursions: bool = True,
) -> PathRecord:
    """Simulate (or classify given ``values`` of) one path on ``[0, t_max]``.

    ``values`` is a test hook: a full grid of ``n_steps + 1`` values replaces
    the Brownian draw and no continuation past ``t_max`` is attempted.
    """
    N = cfg.n_steps
    bar = barriers(P, cone, cfg.dt, N)
    gen = None
    if values is None:
        gen = _rng.stream(cfg.seed, index, _rng.PATHS)
        dB = gen.standard_normal(N) * math.sqrt(cfg.dt)
        values = np.concatenate([[0.0], np.cumsum(dB)])
    else:
        values = np.asarray(values, dtype=float)
        if values.shape != (N + 1,):
            raise ValidationError(f"values must have {N + 1} entries")
        close_excursions = False
    labels, H, L, high = _machine(np.abs(values), bar.g, bar.f, False)
    times = bar.t.copy()
    labels = labels[:-1]
    closed = not high
    if high and close_excursions:
        b = values[-1]
        for dB_ext, _, l_step, b in _extend(gen, P, cone, cfg.dt, N, b, EXTENSION_FACTOR * N):
            k = dB_ext.size
            new_t = times[-1] + cfg.dt * np.arange(1, k + 1)
            values = np.concatenate([values, values[-1] + np.cumsum(dB_ext)])
            times = np.concatenate([times, new_t])
            labels = np.concatenate([labels, np.ones(k, dtype=bool)])
            if l_step is not None:
                L.append(l_step)
                closed = True
    return PathRecord(
        times=times,
        values=values,
        H_list=[float(i * cfg.dt) for i in H],
        L_list=[float(i * cfg.dt) for i in L],
        labels=labels,
        t_max=cfg.t_max,
        closed=closed,
    )


def decompose(path: PathRecord, P: WickPolynomial, cone: ConeConfig) -> PathFunctionals:
    """Martingale sums over LOW/HIGH steps and the high-value sum ``q``.

    Each step contributes the exact increment of ``P(B_t, t)`` across it, a
    discretisation of the Ito integral that telescopes exactly.
    """
    v, t = path.values, path.times
    inc = np.diff(P(v, t))
    low = ~path.labels
    H = np.asarray(path.H_list)
    q = float(np.sum(P(H + cone.A, H))) if H.size else 0.0
    return PathFunctionals(
        d_t=float(P(v[-1], t[-1])),
        d_L=float(np.sum(inc[low])),
        d_H=float(np.sum(inc[~low])),
        q=q,
        p0=float(P(v[0], 0.0)),
        qv_L=float(np.sum(inc[low] ** 2)),
    )


@dataclass
class PathBatch:
    """Per-path functionals and hitting statistics from :func:`simulate_batch`."""

    cfg: SimConfig
    d_t: np.ndarray
    d_L: np.ndarray
    d_H: np.ndarray
    q: np.ndarray
    qv_L: np.ndarray
    counts: np.ndarray  # (n_paths, ceil(t_max)): #H_i in (m-1, m]
    first_H: np.ndarray  # NaN when the cone is never hit
    min_high_P: np.ndarray  # +inf when never HIGH
    high_at_tmax: np.ndarray
    closed: np.ndarray
    t_end: np.ndarray
    q_grid: np.ndarray  # like q but P taken at the detected grid value (includes overshoot)
    p0: float = 0.0
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.d_t.size

    def functionals(self, i: int) -> PathFunctionals:
        return PathFunctionals(
            float(self.d_t[i]), float(self.d_L[i]), float(self.d_H[i]),
            float(self.q[i]), self.p0, float(self.qv_L[i]),
        )

    def decomposition_gap(self) -> np.ndarray:
        return self.d_t - (self.p0 + self.d_L - self.q)


def _run_block(cfg, P, cone, first, count, close_excursions):
    N = cfg.n_steps
    dt = cfg.dt
    sq = math.sqrt(dt)
    bar = barriers(P, cone, dt, N)
    pcoef = P.coeffs_at(bar.t)
    n_win = max(1, math.ceil(cfg.t_max - 1e-9))

    blk = _rng.StreamBlock(cfg.seed, _rng.PATHS, first, count)
    b = np.zeros(count)
    pb = np.full(count, float(P(0.0, 0.0)))
    high = np.zeros(count, dtype=bool)
    d_L = np.zeros(count)
    d_H = np.zeros(count)
    q = np.zeros(count)
    q_grid = np.zeros(count)
    qv = np.zeros(count)
    counts = np.zeros((count, n_win), dtype=np.int32)
    first_H = np.full(count, np.nan)
    min_hp = np.full(count, np.inf)

    def record_hits(j, idx):
        for i in idx:
            q[j] += bar.cone_p[i]
            if np.isnan(first_H[j]):
                first_H[j] = i * dt
            m = math.ceil(i * dt - 1e-9)
            if 1 <= m <= n_win:
                counts[j, m - 1] += 1

    for s in range(0, N, CHUNK):
        L = min(CHUNK, N - s)
        dB = blk.normals(L)
        dB *= sq
        B = np.cumsum(dB, axis=0)
        B += b
        Bprev = np.empty_like(B)
        Bprev[0] = b
        Bprev[1:] = B[:-1]
        # exact per-step increments of the space-time harmonic P(B_t, t)
        PB = _horner_x(pcoef[s + 1 : s + L + 1], B)
        inc = np.diff(PB, axis=0, prepend=pb[None, :])
        absb = np.abs(Bprev)
        hitC = absb >= bar.g[s : s + L, None]
        dirty = high | hitC.any(axis=0)
        clean = ~dirty
        if clean.all():
            d_L += inc.sum(axis=0)
            qv += np.einsum("ij,ij->j", inc, inc)
        else:
            d_L[clean] += inc[:, clean].sum(axis=0)
            qv[clean] += np.einsum("ij,ij->j", inc[:, clean], inc[:, clean])
            for j in np.flatnonzero(dirty):
                lab, Hs, _, high[j] = _machine(absb[:, j], bar.g[s : s + L], bar.f[s : s + L], high[j])
                record_hits(j, [s + i for i in Hs])
                if Hs:
                    hi = np.asarray(Hs)
                    q_grid[j] += float(np.sum(P(Bprev[hi, j], bar.t[s + hi])))
                lo = inc[~lab, j]
                d_L[j] += lo.sum()
                qv[j] += lo @ lo
                d_H[j] += inc[lab, j].sum()
                if lab.any():
                    hp = P(Bprev[lab, j], bar.t[s : s + L][lab])
                    min_hp[j] = min(min_hp[j], float(hp.min()))
        b = B[-1]
        pb = PB[-1]

    # classification at t_max itself
    absb = np.abs(b)
    newH = ~high & (absb >= bar.g[N])
    for j in np.flatnonzero(newH):
        record_hits(j, [N])
        q_grid[j] += float(P(b[j], bar.t[N]))
    newL = high & (absb <= bar.f[N])
    high = (high | newH) & ~newL
    if newH.any():
        min_hp[newH] = np.minimum(min_hp[newH], P(b[newH], bar.t[N]))
    high_at_tmax = high.copy()

    t_end = np.full(count, N * dt)
    closed = ~high
    d_t = P(b, bar.t[N])
    if close_excursions:
        for j in np.flatnonzero(high):
            bj = b[j]
            for dB_ext, prev, l_step, bj in _extend(blk.generator(j), P, cone, dt, N, bj, EXTENSION_FACTOR * N):
                tt = t_end[j] + dt * np.arange(dB_ext.size)
                d_H[j] += float(P(prev[-1] + dB_ext[-1], tt[-1] + dt) - P(prev[0], tt[0]))
                min_hp[j] = min(min_hp[j], float(P(prev, tt).min()))
                t_end[j] += dt * dB_ext.size
                if l_step is not None:
                    closed[j] = True
            d_t[j] = P(bj, t_end[j])
    return dict(
        d_t=d_t, d_L=d_L, d_H=d_H, q=q, q_grid=q_grid, qv_L=qv, counts=counts, first_H=first_H,
        min_high_P=min_hp, high_at_tmax=high_at_tmax, closed=closed, t_end=t_end,
    )


def simulate_batch(
    cfg: SimConfig,
    P: WickPolynomial,
    cone: ConeConfig,
    close_excursions: bool = True,
    block: int = BLOCK,
) -> PathBatch:
    """Simulate ``cfg.n_paths`` independent paths and collect their functionals.

    Path ``i`` uses stream ``(seed, i)`` whatever the block size or thread
    count, so results are bit-identical across ``threads`` settings and agree
    with :func:`simulate_path` for the same index.
    """
    jobs = list(_rng.blocks(cfg.n_paths, block))
    run = lambda fc: _run_block(cfg, P, cone, fc[0], fc[1], close_excursions)  # noqa: E731
    barriers(P, cone, cfg.dt, cfg.n_steps)  # warm the cache before threads start
    if cfg.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            parts = list(ex.map(run, jobs))
    else:
        parts = [run(fc) for fc in jobs]
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    return PathBatch(cfg=cfg, p0=float(P(0.0, 0.0)), **cat)


def hitting_bound(m) -> np.ndarray:
    """``8 / sqrt(2 pi m) exp(-m / 2)``: bound on the mean number of cone hits in (m-1, m]."""
    m = np.asarray(m, dtype=float)
    return 8.0 / np.sqrt(2 * np.pi * m) * np.exp(-m / 2)


def sup_bound(m) -> np.ndarray:
    """``4 / sqrt(2 pi m) exp(-m / 2)``: Gaussian bound on P[sup_{s<=m} |B_s| >= m]."""
    m = np.asarray(m, dtype=float)
    return 4.0 / np.sqrt(2 * np.pi * m) * np.exp(-m / 2)


@dataclass(frozen=True)
class HittingRow:
    m: int
    mean: float
    stderr: float
    paper_bound: float


def hitting_table(batch: PathBatch, m_max: int) -> list[HittingRow]:
    rows = []
    n = len(batch)
    for m in range(1, m_max + 1):
        c = batch.counts[:, m - 1].astype(float)
        rows.append(HittingRow(m, float(c.mean()), float(c.std(ddof=1) / math.sqrt(n)), float(hitting_bound(m))))
    return rows


def hitting_counts(cfg: SimConfig, P: WickPolynomial, cone: ConeConfig, m_max: int) -> list[HittingRow]:
    """Mean number of cone hits per unit window ``(m-1, m]`` for ``m = 1..m_max``.

    Only ``[0, m_max]`` is simulated; later times cannot change these counts.
    """
    if m_max > cfg.t_max:
        raise ValidationError(f"m_max={m_max} exceeds t_max={cfg.t_max}")
    if m_max < 1:
        raise ValidationError("m_max must be >= 1")
    batch = simulate_batch(replace(cfg, t_max=float(m_max)), P, cone, close_excursions=False)
    return hitting_table(batch, m_max)


def markov_halving(counts: np.ndarray, k: int) -> tuple[float, float, int]:
    """Pooled ``P[count >= k+1 | count >= k]`` over all windows.

    Returns ``(p, stderr, n_k)``; ``p`` is NaN when no window reaches ``k``.
    """
    c = np.asarray(counts).ravel()
    n_k = int(np.sum(c >= k))
    if n_k == 0:
        return math.nan, math.nan, 0
    p = float(np.sum(c >= k + 1)) / n_k
    return p, math.sqrt(p * (1 - p) / n_k), n_k


def sup_tail(cfg: SimConfig, m: float) -> tuple[float, float]:
    """MC estimate of ``P[sup_{s<=m} |B_s| >= m]`` on the ``dt`` grid, with stderr."""
    if m > cfg.t_max:
        raise ValidationError(f"m={m} exceeds t_max={cfg.t_max}")
    if m <= 0:
        raise ValidationError("m must be > 0")
    n_steps = int(round(m / cfg.dt))
    sq = math.sqrt(cfg.dt)
    hit = np.zeros(cfg.n_paths, dtype=bool)
    for first, count in _rng.blocks(cfg.n_paths, BLOCK):
        blk = _rng.StreamBlock(cfg.seed, _rng.PATHS, first, count)
        b = np.zeros(count)
        peak = np.zeros(count)
        for s in range(0, n_steps, CHUNK):
            L = min(CHUNK, n_steps - s)
            B = np.cumsum(blk.normals(L) * sq, axis=0) + b
            np.maximum(peak, np.abs(B).max(axis=0), out=peak)
            b = B[-1]
        hit[first : first + count] = peak >= m
    p = float(hit.mean())
    return p, math.sqrt(p * (1 - p) / cfg.n_paths)


def restart_rehit(cfg: SimConfig, P: WickPolynomial, cone: ConeConfig, m: int) -> tuple[float, float]:
    """P[start on the cone at ``m - 1``, return to the envelope, hit the cone again by ``m``].

    Given ``k`` hits in ``(m-1, m]``, the strong Markov property at the
    ``k``-th hit bounds the chance of a ``(k+1)``-th by this probability,
    since the restart has the whole unit window left.  By symmetry only the
    upper branch is simulated.  Returns ``(p, stderr)``.
    """
    if m < 1:
        raise ValidationError("m must be >= 1")
    t0 = float(m - 1)
    n_steps = int(round(1.0 / cfg.dt))
    bar = _barriers(P, float(cone.A), float(cfg.dt), int(round(t0 / cfg.dt)), n_steps + 1)
    sq = math.sqrt(cfg.dt)
    rehit = np.zeros(cfg.n_paths, dtype=bool)
    for first, count in _rng.blocks(cfg.n_paths, BLOCK):
        blk = _rng.StreamBlock(cfg.seed, _rng.PATHS, first, count)
        b = np.full(count, bar.g[0])
        back = np.zeros(count, dtype=bool)
        hit = np.zeros(count, dtype=bool)
        for s in range(0, n_steps, CHUNK):
            L = min(CHUNK, n_steps - s)
            B = np.cumsum(blk.normals(L) * sq, axis=0) + b
            a = np.abs(B)
            inE = a <= bar.f[s + 1 : s + 1 + L, None]
            onC = a >= bar.g[s + 1 : s + 1 + L, None]
            # first envelope return, then a cone hit strictly later
            rE = np.where(back, -1, np.where(inE.any(0), np.argmax(inE, 0), L))
            later = onC & (np.arange(L)[:, None] > rE[None, :])
            hit |= later.any(0) & (back | (rE < L))
            back |= rE < L
            b = B[-1]
        rehit[first : first + count] = hit
    p = float(rehit.mean())
    return p, math.sqrt(p * (1 - p) / cfg.n_paths)
