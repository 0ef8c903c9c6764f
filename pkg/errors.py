"""
errors.py
Exception hierarchy shared by the library and the command-line front end.

Each exception carries the exit code the CLI reports for it, so ``main.py``
only needs a single ``except SsvcqrError`` branch.
"""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NONCONVERGENCE = 4


class SsvcqrError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = EXIT_DATA


class ParameterError(SsvcqrError, ValueError):
    """An argument is outside its admissible range (k <= 0, tau not in (0,1), ...)."""

    exit_code = EXIT_USAGE


class DegenerateGraphError(SsvcqrError):
    """Locations cannot support a neighbourhood graph."""


class DataError(SsvcqrError):
    """Input data is malformed or cannot support the requested computation."""


class SchemaVersionError(DataError):
    """A model artifact was written with a different schema version."""


class SingularSystemError(SsvcqrError):
    """A linear system that must be positive definite is not."""

    def __init__(self, message: str, condition_number: float | None = None):
        super().__init__(message)
        self.condition_number = condition_number


class NonConvergenceError(SsvcqrError):
    """A fit stopped at its iteration limit and the caller asked for strictness."""

    exit_code = EXIT_NONCONVERGENCE
