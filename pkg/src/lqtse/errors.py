"""Exception types raised across the package."""


class LqtseError(Exception):
    """Base class for all package errors."""


class ConfigError(LqtseError, ValueError):
    """Invalid configuration or missing required input."""


class DimensionError(LqtseError, ValueError):
    """Array shapes, lengths or sample rates do not agree."""


class InvalidBatchError(LqtseError, ValueError):
    pass


class TooShortError(LqtseError, ValueError):
    """Signal shorter than one analysis window."""


class UndefinedReferenceError(LqtseError, ValueError):
    """Metric reference signal is identically zero."""


class InvalidCaptionError(LqtseError, ValueError):
    pass


class InvalidQueryError(LqtseError, ValueError):
    """Retrieval query has zero norm or is not finite."""


class CorruptCacheError(LqtseError):
    """A binary file failed validation; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NonFiniteError(LqtseError, FloatingPointError):
    """NaN or Inf encountered during training; carries diagnostic context."""

    def __init__(self, message: str, **context):
        detail = ", ".join(f"{k}={v}" for k, v in context.items())
        super().__init__(f"{message} [{detail}]" if detail else message)
        self.context = context
