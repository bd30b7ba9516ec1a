class CtbenchError(Exception):
    """Base class for all package errors."""


class DataError(CtbenchError, ValueError):
    """Input data violates a format, schema or value constraint."""


class SolverLimitReached(CtbenchError):
    """Branch-and-bound hit its node limit; carries the best incumbent."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
