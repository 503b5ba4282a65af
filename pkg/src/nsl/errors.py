"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, bad input data
exits 2 and numerical failures exit 3.
"""


class NSLError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class InputError(NSLError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class DegenerateFactorError(InputError):
    """A principal direction maps the data to the zero vector."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"factor {index} has zero score norm")


class RefusalError(InputError):
    """A request outside the guarded size limits of an exhaustive routine."""


class NumericError(NSLError, ArithmeticError):
    """Solver or factorization failure."""

    exit_code = 3
