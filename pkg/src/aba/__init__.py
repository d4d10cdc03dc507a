"""Test-time adaptation of imitative policies on a desk-scale grid world."""

from .errors import (
    AbaError,
    ExpertAbort,
    FormatError,
    GrammarError,
    RuntimeFailure,
    SimulationError,
    ValidationError,
)

__all__ = [
    "AbaError",
    "ExpertAbort",
    "FormatError",
    "GrammarError",
    "RuntimeFailure",
    "SimulationError",
    "ValidationError",
]

__version__ = "0.1.0"
