"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation-type errors exit 2,
I/O errors (``OSError``) exit 1 and numeric failures exit 3.
"""


class RelGNNError(Exception):
    """Base class for all package errors."""


class ValidationError(RelGNNError, ValueError):
    """Input violates a documented contract."""


class DimensionError(ValidationError):
    """Tensor shapes do not agree."""


class InputError(ValidationError):
    """Input data is empty or otherwise unusable."""


class ConfigurationError(ValidationError):
    """Configuration values are inconsistent."""


class UndefinedMetricError(ValidationError):
    """A metric is undefined for the given data (e.g. single-class AUC)."""


class ParseError(ValidationError):
    """Malformed file content; carries a location (line or byte offset)."""

    def __init__(self, message, location=None):
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)
        self.location = location


class NumericError(RelGNNError, ArithmeticError):
    """Non-finite values where finite ones are required."""
