"""Inference-time samplers.

Flow-map samplers jump to the data endpoint with x0 = x_t - t * u(x_t, t);
the Euler sampler integrates dx/dt = v backwards from t=1 to t=0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .network import Mlp
from .transport import interpolate


class ModelHandle:
    """Read-only view of a trained model exposing velocity and flow-map queries.

    A two-head model answers flow-map queries with its u-head. A one-head
    (t, r) model answers them with its output at r = 0 and velocity queries
    at r = t. `passes` counts batched forward calls, `point_passes` the
    per-sample total.
    """

    def __init__(self, mlp: Mlp, params: np.ndarray):
        self.mlp = mlp
        self.params = params
        self.passes = 0
        self.point_passes = 0

    @property
    def has_flowmap(self) -> bool:
        cfg = self.mlp.config
        return cfg.num_heads == 2 or cfg.num_time_inputs == 2

    def _forward(self, x, t, r, c):
        self.passes += 1
        self.point_passes += x.shape[0]
        kw = {"r": r} if self.mlp.config.num_time_inputs == 2 else {}
        return self.mlp.forward(self.params, x, t, c=c, **kw)[0]

    def velocity(self, x, t, c=None):
        return self._forward(x, t, t, c).v

    def flowmap(self, x, t, c=None):
        if not self.has_flowmap:
            raise ConfigError("model has no flow-map head; use euler sampling")
        if self.mlp.config.num_heads == 2:
            return self._forward(x, t, None, c).u
        return self._forward(x, t, 0.0, c).v


@dataclass(frozen=True)
class SampleConfig:
    nfe: int = 1
    mode: str = "flowmap"
    schedule: tuple[float, ...] | None = None
    renoise: str = "fresh"
    seed: int = 0

    def __post_init__(self):
        if self.nfe < 1:
            raise ConfigError("nfe must be >= 1")
        if self.mode not in ("flowmap", "euler"):
            raise ConfigError(f"unknown sampling mode {self.mode!r}")
        if self.renoise not in ("fresh", "none"):
            raise ConfigError(f"unknown renoise option {self.renoise!r}")
        if self.schedule is not None:
            check_schedule(self.schedule, self.nfe)

    def time_grid(self) -> np.ndarray:
        if self.schedule is not None:
            return np.asarray(self.schedule, dtype=np.float64)
        return np.linspace(1.0, 0.0, self.nfe + 1)


def check_schedule(schedule, nfe: int):
    s = np.asarray(schedule, dtype=np.float64)
    if s.ndim != 1 or s.size != nfe + 1:
        raise ConfigError(f"schedule needs nfe+1={nfe + 1} points, got {s.size}")
    if s[0] != 1.0 or s[-1] != 0.0:
        raise ConfigError("schedule must start at 1 and end at 0")
    if np.any(np.diff(s) >= 0):
        raise ConfigError("schedule must be strictly decreasing")


def sample_onestep(model, z, c=None) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return z - 1.0 * model.flowmap(z, 1.0, c)


def sample_fewstep(model, z, c=None, cfg: SampleConfig = SampleConfig(nfe=2), rng=None) -> np.ndarray:
    """Alternate flow-map jumps to t=0 with re-noising to the next grid time."""
    if cfg.mode != "flowmap":
        raise ConfigError("sample_fewstep needs mode='flowmap'")
    grid = cfg.time_grid()
    check_schedule(grid, cfg.nfe)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if cfg.renoise == "fresh" and rng is None:
        rng = np.random.default_rng(cfg.seed)
    x = z
    x0 = z
    for i in range(cfg.nfe):
        ti = grid[i]
        x0 = x - ti * model.flowmap(x, ti, c)
        if i < cfg.nfe - 1:
            noise = rng.standard_normal(z.shape) if cfg.renoise == "fresh" else z
            x = interpolate(x0, noise, grid[i + 1])
    return x0


def sample_euler(model, z, c=None, steps: int = 100) -> np.ndarray:
    """Explicit Euler on dx/dt = v from t=1 to t=0 with uniform steps."""
    if steps < 1:
        raise ConfigError("euler sampling needs steps >= 1")
    x = np.atleast_2d(np.asarray(z, dtype=np.float64))
    h = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * h
        x = x - h * model.velocity(x, t, c)
    return x


def generate(model: ModelHandle, z, c, cfg: SampleConfig, rng=None) -> np.ndarray:
    if cfg.mode == "euler":
        return sample_euler(model, z, c, cfg.nfe)
    if cfg.nfe == 1:
        return sample_onestep(model, z, c)
    return sample_fewstep(model, z, c, cfg, rng)
