"""Masking-rate, selection-noise, and temperature schedules.

Time runs t = T..0 during sampling; larger t means more masking. The cosine
masking-rate curve is gamma(u) = sin(pi*u/2), which is 0 at u=0 and 1 at u=1
and increasing, so mask_count(0) = 0 and every sampler terminates with a
complete grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GAMMA_KINDS = ("cosine", "linear")


def gamma(u: float, kind: str = "cosine") -> float:
    """Fraction of positions masked at normalized time u in [0, 1]."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"gamma: u={u} outside [0, 1]")
    if kind == "cosine":
        return math.sin(0.5 * math.pi * u)
    if kind == "linear":
        return float(u)
    raise ValueError(f"gamma: unknown kind {kind!r}")


def gamma_array(u: np.ndarray, kind: str = "cosine") -> np.ndarray:
    """Vectorized gamma over an array of times in [0, 1]."""
    u = np.asarray(u, dtype=np.float64)
    if u.size and (u.min() < 0 or u.max() > 1):
        raise ValueError("gamma: times outside [0, 1]")
    if kind == "cosine":
        return np.sin(0.5 * math.pi * u)
    if kind == "linear":
        return u.copy()
    raise ValueError(f"gamma: unknown kind {kind!r}")


def gamma_inverse(y: float, kind: str = "cosine") -> float:
    if not 0.0 <= y <= 1.0:
        raise ValueError(f"gamma_inverse: y={y} outside [0, 1]")
    if kind == "cosine":
        return 2.0 / math.pi * math.asin(y)
    if kind == "linear":
        return float(y)
    raise ValueError(f"gamma_inverse: unknown kind {kind!r}")


def mask_count_pmf(n: int, kind: str = "cosine") -> np.ndarray:
    """Exact law of r = ceil(n * gamma(t)) for t ~ Uniform(0, 1); index = r."""
    pmf = np.zeros(n + 1)
    for r in range(1, n + 1):
        pmf[r] = gamma_inverse(r / n, kind) - gamma_inverse((r - 1) / n, kind)
    return pmf


def mask_count(t: int, total_steps: int, n: int, kind: str = "cosine") -> int:
    """ceil(gamma(t/T) * n), clamped to [0, n]."""
    if not 0 <= t <= total_steps:
        raise ValueError(f"mask_count: t={t} outside [0, {total_steps}]")
    return min(n, max(0, math.ceil(gamma(t / total_steps, kind) * n)))


def selection_noise(
    t: int, total_steps: int, noise_scale: float, n: int, rng: np.random.Generator
) -> np.ndarray:
    """I.i.d. uniform noise in +-0.5 * noise_scale * t/T, annealed to zero."""
    amplitude = noise_scale * t / total_steps
    if amplitude == 0.0:
        return np.zeros(n)
    return (rng.random(n) - 0.5) * amplitude


def temperature(t: int, total_steps: int, slope: float, intercept: float) -> float:
    """Linear annealing slope * t/T + intercept; must stay positive."""
    value = slope * t / total_steps + intercept
    if value <= 0.0:
        raise ValueError(f"temperature: nonpositive value {value} at t={t}")
    return value


@dataclass(frozen=True)
class Schedule:
    """Bundle of the three schedules shared by training and sampling."""

    total_steps: int
    gamma_kind: str = "cosine"
    noise_scale: float = 0.0
    temp_slope: float = 1.0
    temp_intercept: float = 0.5

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.gamma_kind not in GAMMA_KINDS:
            raise ValueError(f"gamma_kind must be one of {GAMMA_KINDS}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        if self.temp_intercept <= 0 or self.temp_slope + self.temp_intercept <= 0:
            raise ValueError("temperature schedule must be positive on [0, T]")

    def gamma(self, u: float) -> float:
        return gamma(u, self.gamma_kind)

    def mask_count(self, t: int, n: int) -> int:
        return mask_count(t, self.total_steps, n, self.gamma_kind)

    def selection_noise(self, t: int, n: int, rng: np.random.Generator) -> np.ndarray:
        return selection_noise(t, self.total_steps, self.noise_scale, n, rng)

    def temperature(self, t: int) -> float:
        return temperature(t, self.total_steps, self.temp_slope, self.temp_intercept)
