"""Exception hierarchy shared by all modules.

Exit-code mapping used by the CLI: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""

from __future__ import annotations


class SemrecError(Exception):
    """Base class for all package errors."""


class ConfigError(SemrecError):
    """Invalid configuration: bad values, inconsistent widths, unknown keys."""


class DataError(SemrecError):
    """Invalid or inconsistent data."""


class ParseError(DataError):
    """Malformed record in a data file."""

    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class SchemaError(DataError):
    """Record violates the declared schema (e.g. embedding dimension)."""


class DependencyError(DataError):
    """A required upstream artifact is missing; names the producing command."""

    def __init__(self, missing: str, producer: str):
        super().__init__(f"missing {missing}; produce it with the `{producer}` command first")
        self.producer = producer


class DegenerateInputError(DataError):
    """Input too degenerate for the requested operation (e.g. k-means with fewer distinct points than k)."""


class UndefinedMetricError(DataError):
    """Metric has no defined value on the given input (e.g. GAUC with no two-class user)."""


class NumericError(SemrecError):
    """Non-finite value produced where a finite one is required."""
