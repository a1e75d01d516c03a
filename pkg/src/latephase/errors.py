"""Exception hierarchy shared by all modules."""


class LatePhaseError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(LatePhaseError, ValueError):
    """Array shapes do not agree."""


class NumericalError(LatePhaseError, ArithmeticError):
    """Non-finite values, singular systems or non-contractive dynamics."""


class ConfigError(LatePhaseError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(LatePhaseError, ValueError):
    """Malformed dataset or data file."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
