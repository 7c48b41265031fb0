"""Exception types shared across the package."""


class TmSynceError(Exception):
    """Base class for all package errors."""


class DomainError(TmSynceError, ValueError):
    """Raised when a density or map is evaluated at a non-finite point."""


class ConfigurationError(TmSynceError, ValueError):
    """Raised for inconsistent dimensions, shapes or settings."""


class InversionError(TmSynceError, ArithmeticError):
    """Raised when a transport map cannot be inverted at a point."""


class TrainingError(TmSynceError, RuntimeError):
    """Raised when transport map optimization fails or cannot start."""
