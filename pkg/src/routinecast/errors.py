"""Exception hierarchy shared across the pipeline stages."""

from __future__ import annotations


class RoutinecastError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RoutinecastError, ValueError):
    """An argument or configuration value is outside its allowed range."""


class DegenerateInputError(RoutinecastError, ValueError):
    """Input is well-formed but too small to compute the requested quantity."""


class NoPriorError(RoutinecastError, KeyError):
    """A label has no statistics at any fallback level."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class OverlapError(RoutinecastError, ValueError):
    """Two intervals that must be disjoint overlap in time."""
