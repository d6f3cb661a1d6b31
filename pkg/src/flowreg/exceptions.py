"""Exception types shared across the package."""


class FlowRegressionError(Exception):
    """Base class for all library-specific failures."""


class DomainError(FlowRegressionError, ValueError):
    """A point lies outside the domain on which an operation is defined."""


class ConfigurationError(FlowRegressionError, ValueError):
    """Inconsistent options, or data insufficient for the requested operation."""


class NumericError(FlowRegressionError, ArithmeticError):
    """A computation produced non-finite values."""


class LaplaceError(FlowRegressionError):
    """The Laplace approximation is not applicable to the given target."""
