"""Exception hierarchy shared by all modules and mapped to CLI exit codes."""


class ValidationError(ValueError):
    """Bad user input: wrong degree, non-monic polynomial, out-of-domain argument."""


class NumericalError(RuntimeError):
    """A numerical routine failed (root bracketing, factorization, overflow)."""


class CalibrationError(NumericalError):
    """No cone offset passed the calibration checks below the search cap."""
