"""Exception types shared across the package."""

from __future__ import annotations


class LevelPDEError(Exception):
    """Base class for all package errors."""


class InvalidGridError(LevelPDEError):
    """Raised when a grid descriptor cannot produce a usable lattice."""


class InvalidParameterError(LevelPDEError):
    """Raised on out-of-range numerical parameters (epsilon <= 0, bad tolerances, ...)."""


class PreconditionError(LevelPDEError):
    """Raised when a diagnostic's stated hypothesis is violated by its inputs.

    This is distinct from the diagnostic *failing*: a failed hypothesis means
    the check does not apply, not that the field under test is bad.
    """


class NonConvergenceError(LevelPDEError):
    """Raised when an iterative solve exhausts its budget above tolerance.

    Carries the residual history so callers can report or post-mortem the run.
    """

    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history: list[float] = list(history or [])


class ConfigError(LevelPDEError):
    """Raised by the config parser; aggregates every problem found.

    Each problem is a ``(line, key, message)`` tuple where ``line`` is the
    1-based line number (or None when the problem is a missing key).
    """

    def __init__(self, problems: list[tuple[int | None, str, str]]):
        self.problems = list(problems)
        lines = []
        for line, key, message in self.problems:
            where = f"line {line}" if line is not None else "config"
            lines.append(f"{where}: {key}: {message}")
        super().__init__("\n".join(lines))
