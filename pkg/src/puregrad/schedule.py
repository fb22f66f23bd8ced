"""Variance-preserving noise schedules.

A linear rate beta(t) = beta_min + t*(beta_max - beta_min) on t in [0, 1],
with the closed-form attenuation alpha(t) = exp(-integral of beta), and a
discrete table beta_i = beta(i/T)/T for the step-indexed reverse chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance-preserving schedule; immutable and freely shared."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    T_discrete: int | None = None

    def __post_init__(self):
        if not (0.0 < self.beta_min <= self.beta_max):
            raise ConfigurationError(
                f"schedule requires 0 < beta_min <= beta_max, got "
                f"({self.beta_min}, {self.beta_max})")

    def _check_time(self, t: float, where: str) -> float:
        t = float(t)
        if not (0.0 <= t <= 1.0):
            raise ConfigurationError(f"{where}: time {t} outside [0, 1]")
        return t

    def beta(self, t: float) -> float:
        """Instantaneous rate at time t."""
        t = self._check_time(t, "beta")
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def alpha(self, t: float) -> float:
        """exp(-(beta_min*t + (beta_max-beta_min)*t^2/2)), in (0, 1]."""
        t = self._check_time(t, "alpha")
        return math.exp(-(self.beta_min * t + (self.beta_max - self.beta_min) * t * t / 2.0))

    def discrete_betas(self, T: int | None = None) -> np.ndarray:
        """Per-step rates beta_i = beta(i/T)/T for i = 1..T; all in (0, 1)."""
        T = self.T_discrete if T is None else T
        if T is None or T < 1:
            raise ConfigurationError(f"discrete_betas: step count must be >= 1, got {T}")
        i = np.arange(1, T + 1, dtype=np.float64)
        betas = (self.beta_min + (i / T) * (self.beta_max - self.beta_min)) / T
        if betas[-1] >= 1.0:
            raise ConfigurationError(
                f"discrete_betas: T={T} too coarse, beta_{T}={betas[-1]} >= 1")
        return betas

    def discrete_beta(self, i: int, T: int | None = None) -> float:
        """beta_i for one 1-based step index."""
        T = self.T_discrete if T is None else T
        if T is None or T < 1:
            raise ConfigurationError(f"discrete_beta: step count must be >= 1, got {T}")
        if not (1 <= i <= T):
            raise ConfigurationError(f"discrete_beta: index {i} outside 1..{T}")
        b = (self.beta_min + (i / T) * (self.beta_max - self.beta_min)) / T
        if b >= 1.0:
            raise ConfigurationError(f"discrete_beta: T={T} too coarse, beta_{i}={b} >= 1")
        return b
