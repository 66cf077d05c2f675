"""Wick-ordered polynomials of Brownian motion and the cut-off GFF.

Exact Hermite/Wick calculus, zero envelopes and cones, stopping-time
decompositions of single-site paths, Brownian couplings, a smooth
white-noise field sampler and Monte Carlo concentration estimators.
"""

from wickmart.errors import CalibrationError, NumericalError, ValidationError
from wickmart.wickpoly import Polynomial, WickPolynomial, hermite, wick_order

__all__ = [
    "CalibrationError",
    "NumericalError",
    "Polynomial",
    "ValidationError",
    "WickPolynomial",
    "hermite",
    "wick_order",
]

__version__ = "0.1.0"
