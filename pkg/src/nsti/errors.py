"""Exception types shared across the package."""


class NSTIError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(NSTIError, ValueError):
    """A configuration or argument failed validation."""


class DimensionError(ValidationError):
    """Tensor or array shapes are incompatible."""


class UsageError(ValidationError):
    """An API was called in a way it does not support."""


class NumericError(NSTIError, ArithmeticError):
    """Non-finite values or an invalid numeric state were encountered."""


class FeasibilityError(NSTIError, ValueError):
    """A CTC label sequence cannot be aligned to the available frames."""


class FormatError(NSTIError, ValueError):
    """A file on disk does not match the expected binary layout."""


class StitchError(NSTIError, ValueError):
    """Windowed outputs do not cover the full recording."""


class GenerationError(NSTIError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class TrainingError(NumericError):
    """Training diverged."""
