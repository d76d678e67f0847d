"""Spiking transformer with partial-information self-attention, at desk scale."""

from est.errors import (
    AccountingError,
    ConfigError,
    ConsistencyError,
    DimensionError,
    DivergenceError,
    EstError,
    InputError,
    ParseError,
    SequencingError,
    ThresholdError,
)

__version__ = "0.1.0"

__all__ = [
    "AccountingError",
    "ConfigError",
    "ConsistencyError",
    "DimensionError",
    "DivergenceError",
    "EstError",
    "InputError",
    "ParseError",
    "SequencingError",
    "ThresholdError",
]
