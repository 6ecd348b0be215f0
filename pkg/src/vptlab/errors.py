"""Exception hierarchy shared across the package."""


class VPTError(Exception):
    """Base class for all package errors."""


class ShapeError(VPTError, ValueError):
    """Operands have incompatible shapes."""


class NumericError(VPTError, ArithmeticError):
    """A NaN or infinite value appeared where a finite one is required."""


class UsageError(VPTError, RuntimeError):
    """An API was called in a state that does not support it."""


class DataError(VPTError, ValueError):
    """Input data is malformed or violates a data contract."""


class MetricError(VPTError, ValueError):
    """A metric is undefined for the given input."""
