"""Dual-branch (center + pairwise) deep hashing with a split-merge mixture of hash experts."""

from unihash.errors import (
    CapabilityError,
    ConfigError,
    FormatError,
    GenerationError,
    NumericError,
    ProtocolError,
    ShapeError,
    UniHashError,
)

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "ConfigError",
    "FormatError",
    "GenerationError",
    "NumericError",
    "ProtocolError",
    "ShapeError",
    "UniHashError",
]
