"""Adversarial unmix-and-remix: unsupervised separation of additively mixed images."""

from advunmix.errors import (
    ConfigError,
    DataError,
    DimensionError,
    DivergenceError,
    FormatError,
    IncompatibleCheckpointError,
    LengthError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "IncompatibleCheckpointError",
    "LengthError",
]
