"""Linear transport path x_t = t*z + (1-t)*x, its targets, and time sampling.

Time runs from data (t=0) to noise (t=1). Every function accepts a single
point of shape (d,) or a batch of shape (B, d); times are scalars or (B,).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, StructuralError

# Guard keeping sampled times away from 0 and 1.
TIME_EPS = 1e-3


@dataclass(frozen=True)
class TransportPath:
    """Affine path x_t = alpha(t)*z + gamma(t)*x."""

    alpha: Callable[[np.ndarray], np.ndarray]
    gamma: Callable[[np.ndarray], np.ndarray]
    alpha_dot: Callable[[np.ndarray], np.ndarray]
    gamma_dot: Callable[[np.ndarray], np.ndarray]


LINEAR = TransportPath(
    alpha=lambda t: t,
    gamma=lambda t: 1.0 - t,
    alpha_dot=lambda t: np.ones_like(t),
    gamma_dot=lambda t: -np.ones_like(t),
)


@dataclass(frozen=True)
class TimeDistribution:
    theta1: float = 2.0
    theta2: float = 2.0

    def __post_init__(self):
        if not (self.theta1 > 0 and self.theta2 > 0):
            raise ConfigError(
                f"Beta parameters must be positive, got ({self.theta1}, {self.theta2})"
            )


def _check_pair(x, z):
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise StructuralError(f"shape mismatch: x {x.shape} vs z {z.shape}")
    return x, z


def _time_column(t, x: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=x.dtype)
    if x.ndim == 2 and t.ndim == 1:
        if t.shape[0] != x.shape[0]:
            raise StructuralError(f"{t.shape[0]} times for a batch of {x.shape[0]}")
        return t[:, None]
    return t


def interpolate(x, z, t, path: TransportPath = LINEAR) -> np.ndarray:
    x, z = _check_pair(x, z)
    tt = np.asarray(t, dtype=np.float64)
    if np.any(tt < 0.0) or np.any(tt > 1.0):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    tc = _time_column(tt, x)
    return path.alpha(tc) * z + path.gamma(tc) * x


def velocity_target(x, z, t=None, path: TransportPath = LINEAR) -> np.ndarray:
    """d x_t / dt. For the linear path this is z - x regardless of t."""
    x, z = _check_pair(x, z)
    if path is LINEAR:
        return z - x
    tc = _time_column(np.asarray(t, dtype=np.float64), x)
    return path.alpha_dot(tc) * z + path.gamma_dot(tc) * x


def sample_time(
    rng: np.random.Generator,
    dist: TimeDistribution,
    size: int | None = None,
    guard: float = TIME_EPS,
) -> np.ndarray | float:
    """Draw t ~ Beta(theta1, theta2) clamped to [guard, 1 - guard].

    Uses the gamma-ratio construction G1 / (G1 + G2) with
    G_i ~ Gamma(theta_i, 1), valid for every positive shape.
    """
    if not (dist.theta1 > 0 and dist.theta2 > 0):
        raise ConfigError("Beta parameters must be positive")
    g1 = rng.standard_gamma(dist.theta1, size=size)
    g2 = rng.standard_gamma(dist.theta2, size=size)
    t = g1 / (g1 + g2)
    return np.clip(t, guard, 1.0 - guard)


def flowmap_oracle(x_t, x0, t) -> np.ndarray:
    """Straight-line vector (x_t - x0) / t pointing from the data endpoint to x_t."""
    x_t, x0 = _check_pair(x_t, x0)
    tt = np.asarray(t, dtype=np.float64)
    if np.any(tt <= 0.0):
        raise DomainError(f"flow map needs t > 0, got {t}")
    return (x_t - x0) / _time_column(tt, x_t)
