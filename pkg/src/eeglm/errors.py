"""Exception taxonomy shared across the package.

Each error family maps to a stable CLI exit code so shell callers can
branch on failure class without parsing messages.
"""

from __future__ import annotations


class EeglmError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(EeglmError):
    """Bad command-line usage or an invalid/violated configuration."""

    exit_code = 2


class ConfigError(UsageError):
    """Config file or resolved-settings problem."""


class DataError(EeglmError):
    """Data ingestion or dataset-consistency failure."""

    exit_code = 3


class MontageError(DataError):
    """Montage definition problem or montage/recording mismatch."""


class AssemblyError(DataError):
    """Hybrid token sequence could not be assembled consistently."""


class TransportError(EeglmError):
    """LLM endpoint or other network transport failure."""

    exit_code = 4


class NumericError(EeglmError):
    """Non-finite values or numerically invalid state."""

    exit_code = 5


class ShapeError(NumericError):
    """Operand shapes incompatible for the requested operation."""
