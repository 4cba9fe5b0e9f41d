"""Exception types shared across the package."""


class CondflowError(Exception):
    """Base class for all package errors."""


class ShapeError(CondflowError):
    """Array shapes are incompatible with the requested operation."""


class DomainError(CondflowError):
    """An input value lies outside the mathematical domain of an operation."""


class InvertibilityError(CondflowError):
    """A flow transform lost its guaranteed invertibility (bad coefficients)."""


class InputError(CondflowError):
    """User-supplied data fails a structural precondition."""


class ConfigError(CondflowError):
    """A configuration value or combination is invalid."""


class TrainingError(CondflowError):
    """Optimization diverged or produced a non-finite loss."""


class FormatError(CondflowError):
    """An external file does not match the expected schema."""
