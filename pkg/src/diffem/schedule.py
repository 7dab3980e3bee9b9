"""Variance-exploding diffusion schedule.

The forward process adds noise without scaling the signal (drift 0, scale 1),
so the perturbation kernel at time t is N(x_t; x, sigma(t)^2 I) with sigma
increasing exponentially from sigma_min to sigma_max.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, DomainError

__all__ = ["NoiseSchedule", "DEFAULT_SCHEDULE"]

TRAIN_TIME_BETA_A = 3.0
TRAIN_TIME_BETA_B = 3.0


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 1e-3
    sigma_max: float = 1e2

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise DomainError(
                f"require 0 < sigma_min < sigma_max, got ({self.sigma_min}, {self.sigma_max})"
            )

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise DomainError(f"time must lie in [0, 1], got {t}")
        return t

    def sigma(self, t):
        """Noise level sigma(t) = exp((1-t) log sigma_min + t log sigma_max)."""
        t = self._check_t(t)
        val = np.exp((1.0 - t) * np.log(self.sigma_min) + t * np.log(self.sigma_max))
        return float(val) if val.ndim == 0 else val

    def perturb(self, x, t, noise):
        """x + sigma(t) * noise, the forward perturbation at time t."""
        x = np.asarray(x, dtype=np.float64)
        noise = np.asarray(noise, dtype=np.float64)
        if x.shape != noise.shape:
            raise DimensionMismatchError("perturb noise shape", expected=x.shape,
                                         got=noise.shape)
        return x + self.sigma(t) * noise

    def loss_weight(self, t):
        """Training weight 1/sigma(t)^2 + 1 (inverse squared output scale)."""
        s = self.sigma(t)
        return 1.0 / s**2 + 1.0

    def sample_train_time(self, rng, size=None):
        """Draw training times from Beta(3, 3), concentrated at mid-schedule."""
        return rng.beta(TRAIN_TIME_BETA_A, TRAIN_TIME_BETA_B, size=size)

    def grid(self, num_steps):
        """Uniform discretization t_i = i/T, i = 0..T."""
        return np.linspace(0.0, 1.0, num_steps + 1)


DEFAULT_SCHEDULE = NoiseSchedule()
