"""Exception hierarchy. Each class maps to a CLI exit code."""


class IvForestError(Exception):
    exit_code = 1


class ValidationError(IvForestError, ValueError):
    """Bad configuration or arguments."""

    exit_code = 2


class DataError(IvForestError, ValueError):
    """Input data violates the frame invariants."""

    exit_code = 3


class NumericalError(IvForestError, ArithmeticError):
    exit_code = 4


class WeakIdentificationError(NumericalError):
    """Instrument carries (almost) no information about treatment."""
