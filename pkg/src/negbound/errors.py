class NegboundError(Exception):
    """Base class for package errors."""


class NumericalError(NegboundError, ArithmeticError):
    """A computation lost too much precision or failed to converge."""


class DivergenceError(NegboundError):
    """Training loss left the admissible range."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class FormatError(NegboundError, ValueError):
    """Malformed embedding file or report."""
