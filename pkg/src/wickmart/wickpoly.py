"""Hermite polynomials and Wick ordering with respect to Brownian variance.

Coefficients are kept exact (``int`` / ``Fraction``) and only turned into
floats at evaluation time.  All coefficient lists are degree-ascending.

The Wick-ordered polynomial of a monic even polynomial ``R`` is the
bivariate polynomial

    P_R(x; t) = sum_i a_i t^(i/2) He_i(x / sqrt(t))

which is a genuine polynomial in ``(x, t)``: ``He_i`` only contains powers
``x^j`` with ``j = i mod 2``, so every ``t`` exponent ``(i - j)/2`` is an
integer, odd ``a_i`` included.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from wickmart.errors import ValidationError

MAX_DEGREE = 64


@dataclass(frozen=True)
class HermiteTable:
    """Probabilists' Hermite polynomials He_0..He_max with unit leading coefficient.

    ``rows[k][j]`` is the (integer) coefficient of ``x^j`` in ``He_k``.
    """

    max_degree: int
    rows: tuple[tuple[int, ...], ...]

    def __getitem__(self, k: int) -> tuple[int, ...]:
        return self.rows[k]

    def __call__(self, k: int, x):
        """Evaluate He_k at ``x`` (float arithmetic)."""
        return np.polynomial.polynomial.polyval(x, [float(c) for c in self.rows[k]])


def hermite(max_degree: int) -> HermiteTable:
    """Build He_0..He_max_degree from He_{k+1} = x He_k - k He_{k-1}."""
    if max_degree < 0:
        raise ValidationError("max_degree must be >= 0")
    if max_degree > MAX_DEGREE:
        raise ValidationError(f"Hermite degree {max_degree} exceeds cap {MAX_DEGREE}")
    rows: list[list[int]] = [[1]]
    if max_degree >= 1:
        rows.append([0, 1])
    for k in range(1, max_degree):
        nxt = [0] + rows[k]  # x * He_k
        for j, c in enumerate(rows[k - 1]):
            nxt[j] -= k * c
        rows.append(nxt)
    return HermiteTable(max_degree, tuple(tuple(r) for r in rows))


def _as_fraction(c) -> Fraction:
    if isinstance(c, Fraction):
        return c
    if isinstance(c, (int, np.integer)):
        return Fraction(int(c))
    if isinstance(c, str):
        return Fraction(c.strip())
    return Fraction(float(c))


def parse_coeffs(text: str) -> list[Fraction]:
    """Parse ``"0,0,0,0,1"`` (degree-ascending; ints, decimals or ``p/q``)."""
    parts = [p for p in text.replace(" ", "").split(",") if p != ""]
    if not parts:
        raise ValidationError("empty coefficient list")
    try:
        return [Fraction(p) for p in parts]
    except (ValueError, ZeroDivisionError) as exc:
        raise ValidationError(f"bad coefficient list {text!r}: {exc}") from None


@dataclass(frozen=True)
class Polynomial:
    """Real monic polynomial of even degree 2n >= 4, coefficients degree-ascending."""

    coeffs: tuple[Fraction, ...]

    def __post_init__(self):
        c = tuple(_as_fraction(a) for a in self.coeffs)
        object.__setattr__(self, "coeffs", c)
        d = len(c) - 1
        if d < 4:
            raise ValidationError(f"degree {d} < 4; need an even degree 2n with n >= 2")
        if d % 2:
            raise ValidationError(f"odd degree {d}; need an even degree")
        if d > MAX_DEGREE:
            raise ValidationError(f"degree {d} exceeds cap {MAX_DEGREE}")
        if c[-1] != 1:
            raise ValidationError(f"leading coefficient is {c[-1]}, must be exactly 1")

    @classmethod
    def parse(cls, text: str) -> "Polynomial":
        return cls(tuple(parse_coeffs(text)))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @property
    def n(self) -> int:
        return self.degree // 2

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(x, [float(a) for a in self.coeffs])

    def __str__(self) -> str:
        return ",".join(str(a) for a in self.coeffs)


def wick_expand(coeffs: Sequence) -> tuple[tuple[Fraction, ...], ...]:
    """Wick-order an arbitrary coefficient list (no monic/degree checks).

    Returns ``table[j][k]``: coefficient of ``x^j t^k``.  Linear in ``coeffs``.
    """
    a = [_as_fraction(c) for c in coeffs]
    d = len(a) - 1
    if d > MAX_DEGREE:
        raise ValidationError(f"degree {d} exceeds cap {MAX_DEGREE}")
    he = hermite(max(d, 0))
    table = [[Fraction(0)] * (d // 2 + 1) for _ in range(d + 1)]
    for i, ai in enumerate(a):
        if ai == 0:
            continue
        for j, h in enumerate(he[i]):
            if h:
                table[j][(i - j) // 2] += ai * h
    return tuple(tuple(row) for row in table)


def _to_float(table) -> np.ndarray:
    return np.array([[float(c) for c in row] for row in table], dtype=float)


def _horner2(tab: np.ndarray, x, t):
    """Evaluate ``sum_jk tab[j, k] x^j t^k`` with broadcasting."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    out = None
    for j in range(tab.shape[0] - 1, -1, -1):
        cj = tab[j, -1]
        for k in range(tab.shape[1] - 2, -1, -1):
            cj = cj * t + tab[j, k]
        out = cj + 0.0 * t if out is None else out * x + cj
    out = np.broadcast_to(out, np.broadcast_shapes(x.shape, t.shape))
    return out[()] if out.ndim == 0 else np.array(out)


@dataclass(frozen=True)
class WickPolynomial:
    """``P_R(x; t)`` stored as an exact bivariate coefficient table."""

    base: Polynomial
    table: tuple[tuple[Fraction, ...], ...] = field(repr=False)

    @property
    def degree(self) -> int:
        return self.base.degree

    @property
    def n(self) -> int:
        return self.base.n

    @cached_property
    def _f(self) -> np.ndarray:
        return _to_float(self.table)

    @cached_property
    def _fdx(self) -> np.ndarray:
        tab = self._f
        return np.array([j * tab[j] for j in range(1, tab.shape[0])])

    @cached_property
    def _fdxx(self) -> np.ndarray:
        tab = self._fdx
        return np.array([j * tab[j] for j in range(1, tab.shape[0])])

    @cached_property
    def _fdt(self) -> np.ndarray:
        tab = self._f
        return np.column_stack([k * tab[:, k] for k in range(1, tab.shape[1])])

    def terms(self) -> list[tuple[int, int, Fraction]]:
        """Nonzero ``(xpow, tpow, coef)`` triples, highest x power first."""
        out = []
        for j in range(len(self.table) - 1, -1, -1):
            for k, c in enumerate(self.table[j]):
                if c != 0:
                    out.append((j, k, c))
        return out

    def __call__(self, x, t):
        return _horner2(self._f, x, t)

    def dx(self, x, t):
        return _horner2(self._fdx, x, t)

    def dxx(self, x, t):
        return _horner2(self._fdxx, x, t)

    def dt(self, x, t):
        return _horner2(self._fdt, x, t)

    def coeffs_at(self, t) -> np.ndarray:
        """x-coefficients (ascending) of ``P(.; t)``; shape ``t.shape + (2n+1,)``."""
        t = np.asarray(t, dtype=float)
        tab = self._f
        out = np.zeros(t.shape + (tab.shape[0],))
        for k in range(tab.shape[1] - 1, -1, -1):
            out = out * t[..., None] + tab[:, k]
        return out

    def min_value(self, t: float) -> float:
        """Global minimum over real x of ``P(x; t)`` (attained at a critical point)."""
        dcoef = np.polynomial.polynomial.polyder(self.coeffs_at(t))
        crit = np.polynomial.polynomial.polyroots(dcoef)
        crit = crit.real[np.abs(crit.imag) <= 1e-7 * (1 + np.abs(crit.real))]
        return float(np.min(self(crit, t)))


def wick_order(R: Polynomial | Iterable) -> WickPolynomial:
    """Wick-order a monic even polynomial of degree >= 4.

    >>> [(j, k, int(c)) for j, k, c in wick_order(Polynomial((0, 0, 0, 0, 1))).terms()]
    [(4, 0, 1), (2, 1, -6), (0, 2, 3)]
    """
    if not isinstance(R, Polynomial):
        R = Polynomial(tuple(R))
    return WickPolynomial(R, wick_expand(R.coeffs))


def evaluate(P: WickPolynomial, x, t):
    """``P_R(x; t)``; ``t`` must be nonnegative."""
    if np.any(np.asarray(t) < 0):
        raise ValidationError("t must be >= 0")
    return P(x, t)


def evaluate_dx(P: WickPolynomial, x, t):
    """Exact ``dP_R/dx`` at ``(x, t)``."""
    if np.any(np.asarray(t) < 0):
        raise ValidationError("t must be >= 0")
    return P.dx(x, t)


def monomial(degree: int) -> WickPolynomial:
    """Wick power ``:x^degree:``."""
    return wick_order(Polynomial((0,) * degree + (1,)))
