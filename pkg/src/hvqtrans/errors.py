"""Exception types shared across the package."""


class HVQError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HVQError, ValueError):
    """Shapes, modes or hyperparameters are inconsistent."""


class InputError(HVQError, ValueError):
    """Input data violates a precondition (non-finite values, bad layout...)."""


class InternalError(HVQError, RuntimeError):
    """An internal invariant was broken."""


class UndefinedMetricError(HVQError, ValueError):
    """A metric cannot be computed for the given labels."""
