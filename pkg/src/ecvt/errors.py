"""Exception types raised across the package."""


class ECVTError(Exception):
    """Base class for all package errors."""


class DimensionError(ECVTError, ValueError):
    pass


class ConfigError(ECVTError, ValueError):
    pass


class ContractError(ECVTError, ValueError):
    """An input violates an operation's documented precondition."""


class VocabularyError(ECVTError, KeyError):
    pass


class LabelError(ECVTError, ValueError):
    pass


class NumericError(ECVTError, FloatingPointError):
    """A NaN or Inf surfaced in a loss; ``term`` names the offending component."""

    def __init__(self, message: str, term: str | None = None, step: int | None = None):
        super().__init__(message)
        self.term = term
        self.step = step


class GenerationError(ECVTError, RuntimeError):
    pass
