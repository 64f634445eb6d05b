"""Exception hierarchy.

The CLI maps :class:`ValidationError` to exit status 1 and
:class:`NumericalError` to exit status 2.
"""


class DensregError(Exception):
    """Base class for all package errors."""


class ValidationError(DensregError, ValueError):
    """Bad input: mismatched grids, wrong shapes, malformed files."""


class NumericalError(DensregError, ArithmeticError):
    """A computation left its domain of validity (fold, NaN)."""


class FoldError(NumericalError):
    """A map stopped being a diffeomorphism (Jacobian determinant <= 0)."""

    def __init__(self, message, step=None, location=None):
        super().__init__(message)
        self.step = step
        self.location = location
