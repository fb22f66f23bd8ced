"""Error classes shared across modules; the CLI maps them onto exit codes."""

from __future__ import annotations


class ConfigurationError(ValueError):
    """Inconsistent or invalid run configuration."""


class NumericDivergenceError(RuntimeError):
    """A purification state went non-finite; carries the failing step."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at reverse step {step}")


class ReplayIntegrityError(RuntimeError):
    """A recomputed state failed to match the stored state bitwise."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"recomputed state mismatch at reverse step {step}")
