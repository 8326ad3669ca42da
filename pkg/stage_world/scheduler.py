"""EDM noise schedule, noising and the deterministic Euler sampler step."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
RHO = 7.0
SIGMA_DATA = 0.5


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters or sampler arguments."""


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.sigmas) < 2:
            raise ScheduleError("a schedule needs at least 2 sigmas")
        if any(sigma <= 0 for sigma in self.sigmas):
            raise ScheduleError("sigmas must be positive")
        if any(later >= earlier for earlier, later in zip(self.sigmas, self.sigmas[1:])):
            raise ScheduleError("sigmas must be strictly decreasing")

    @property
    def n_steps(self) -> int:
        return len(self.sigmas)

    @property
    def sigma_max(self) -> float:
        return self.sigmas[0]

    @property
    def sigma_min(self) -> float:
        return self.sigmas[-1]

    def with_terminal(self) -> Tuple[float, ...]:
        return self.sigmas + (0.0,)

    def next_sigma(self, step_index: int) -> float:
        return self.with_terminal()[step_index + 1]


def edm_sigmas(n: int, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX, rho: float = RHO) -> NoiseSchedule:
    """Power-law (Karras) schedule from sigma_max down to sigma_min."""
    if n < 2:
        raise ScheduleError(f"n must be at least 2, got {n}")
    if not 0 < sigma_min < sigma_max:
        raise ScheduleError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if rho <= 0:
        raise ScheduleError(f"rho must be positive, got {rho}")
    ramp = np.arange(n, dtype=np.float64) / (n - 1)
    max_inv_rho = sigma_max ** (1.0 / rho)
    min_inv_rho = sigma_min ** (1.0 / rho)
    sigmas = (max_inv_rho + ramp * (min_inv_rho - max_inv_rho)) ** rho
    values = [float(value) for value in sigmas]
    values[0] = float(sigma_max)
    values[-1] = float(sigma_min)
    return NoiseSchedule(sigmas=tuple(values))


def add_noise(x0: np.ndarray, sigma: float, eps: np.ndarray) -> np.ndarray:
    """x_t = x0 + sigma * eps."""
    if sigma < 0:
        raise ScheduleError(f"sigma must be non-negative, got {sigma}")
    if np.shape(x0) != np.shape(eps):
        raise ScheduleError(f"x0 shape {np.shape(x0)} does not match noise shape {np.shape(eps)}")
    return (np.asarray(x0, dtype=np.float64) + sigma * np.asarray(eps, dtype=np.float64)).astype(np.float32)


def sampler_step(x_t: np.ndarray, x0_hat: np.ndarray, sigma_t: float, sigma_next: float) -> np.ndarray:
    """Euler step of the probability-flow ODE under x0-parameterization."""
    if sigma_t <= 0:
        raise ScheduleError(f"sigma_t must be positive, got {sigma_t}")
    if not sigma_next < sigma_t:
        raise ScheduleError(f"sigma_next ({sigma_next}) must be below sigma_t ({sigma_t})")
    x_t64 = np.asarray(x_t, dtype=np.float64)
    x0_64 = np.asarray(x0_hat, dtype=np.float64)
    return (x0_64 + (sigma_next / sigma_t) * (x_t64 - x0_64)).astype(np.float32)


def log_uniform_sigma(rng: np.random.Generator, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX) -> float:
    """Training-time noise level: log-uniform over [sigma_min, sigma_max]."""
    return float(math.exp(rng.uniform(math.log(sigma_min), math.log(sigma_max))))


def preconditioning(sigma: float, sigma_data: float = SIGMA_DATA) -> Tuple[float, float, float, float]:
    """(c_skip, c_out, c_in, c_noise) wrapping the raw network into an x0 estimate."""
    if sigma <= 0:
        raise ScheduleError(f"sigma must be positive, got {sigma}")
    total = sigma * sigma + sigma_data * sigma_data
    c_skip = sigma_data * sigma_data / total
    c_out = sigma * sigma_data / math.sqrt(total)
    c_in = 1.0 / math.sqrt(total)
    c_noise = math.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise
