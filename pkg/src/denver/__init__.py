"""Unsupervised vessel segmentation of X-ray angiography videos by
test-time trained layer decomposition."""

from denver.errors import (
    ConfigError,
    DenverError,
    FormatError,
    InputError,
    NumericError,
    RangeError,
    StageOrderError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DenverError",
    "FormatError",
    "InputError",
    "NumericError",
    "RangeError",
    "StageOrderError",
]
