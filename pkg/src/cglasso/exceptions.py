"""Exception hierarchy shared by the estimation modules."""


class CglassoError(Exception):
    """Base class for all errors raised by the package."""


class DataError(CglassoError, ValueError):
    """Malformed or inconsistent input data (bad shapes, bounds, markers)."""


class NumericalError(CglassoError, ArithmeticError):
    """A numerical procedure could not produce a valid result."""


class DegenerateRegionError(NumericalError):
    """The probability of a censoring region fell below the underflow floor.

    ``row`` identifies the offending observation when known.
    """

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class IllConditionedError(NumericalError):
    """A precision block needed for conditioning is numerically singular."""


class NotPositiveDefiniteError(NumericalError):
    """A matrix that must be positive (semi)definite is not."""
