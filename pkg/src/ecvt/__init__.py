"""Transformer video encoder guided by global, sub-event and event-graph prompts,
for temporal action localization on synthetic untrimmed videos."""

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    ECVTError,
    GenerationError,
    LabelError,
    NumericError,
    VocabularyError,
)
from .numerics import Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "ECVTError",
    "GenerationError",
    "LabelError",
    "NumericError",
    "Tensor",
    "VocabularyError",
    "grad_check",
]
