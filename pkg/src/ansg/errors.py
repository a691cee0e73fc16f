"""Exception hierarchy shared by all modules."""


class AnsgError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(AnsgError, ValueError):
    """Tensor extents or channel counts do not conform."""


class ConfigError(AnsgError, ValueError):
    """Invalid or inconsistent configuration."""


class UsageError(AnsgError, ValueError):
    """An operation was called outside its preconditions."""


class NumericError(AnsgError, ArithmeticError):
    """NaN/Inf encountered, or a numerical check failed."""


class FormatError(AnsgError, ValueError):
    """Malformed binary file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
