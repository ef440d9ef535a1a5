"""Training objectives and their bootstrap targets.

All losses are plain squared l2 norms averaged over the batch. Targets are
built from a detached parameter snapshot and never carry gradient; every
forward pass is tallied as gradient-tracking (cache kept for backprop) or
gradient-free so per-step costs can be audited.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError, DomainError, StructuralError
from .network import Mlp, grad_check
from .transport import interpolate


@dataclass(frozen=True)
class GuidanceConfig:
    zeta: float = 0.0
    p_uncond: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.zeta < 1.0:
            raise ConfigError(f"zeta must lie in [0, 1), got {self.zeta}")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigError(f"p_uncond must lie in [0, 1), got {self.p_uncond}")


@dataclass(frozen=True)
class FdConfig:
    epsilon: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 0.25:
            raise ConfigError(f"fd epsilon must lie in (0, 0.25], got {self.epsilon}")


@dataclass(frozen=True)
class BaselineConfig:
    rho: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")


@dataclass
class Batch:
    """One training batch. `c` holds labels after class dropout (null index
    = num_classes) or None for unconditional models; `route` holds the
    single-branch routing draws p ~ U(0, 1)."""

    x: np.ndarray
    z: np.ndarray
    t: np.ndarray
    c: np.ndarray | None = None
    route: np.ndarray | None = None

    @property
    def xt(self) -> np.ndarray:
        return interpolate(self.x, self.z, self.t)

    @property
    def v(self) -> np.ndarray:
        return self.z - self.x

    def __len__(self):
        return self.x.shape[0]


@dataclass
class LossBreakdown:
    total: float
    l_v: float
    l_u: float
    grad_free_passes: int
    grad_tracking_passes: int


def _null_labels(mlp: Mlp, c):
    if c is None:
        return None
    return np.full_like(c, mlp.config.null_class)


def _check_guidance(mlp: Mlp, guidance: GuidanceConfig):
    if guidance.zeta != 0.0 and mlp.config.num_classes == 0:
        raise ConfigError("zeta > 0 needs a class-conditional model (guidance rule)")


def enhance_velocity(v, v_cond_sg, v_uncond_sg, zeta: float, conditional: bool = True):
    """v + zeta * (v_cond - v_uncond). Both predictions must already be detached."""
    if zeta != 0.0 and not conditional:
        raise ConfigError("zeta > 0 needs a class-conditional model (guidance rule)")
    if zeta == 0.0:
        return np.asarray(v)
    return v + zeta * (v_cond_sg - v_uncond_sg)


def _fd_times(t: np.ndarray, eps: float):
    t = np.asarray(t, dtype=np.float64)
    hi = t + eps
    lo = t - eps
    top = hi > 1.0
    hi = np.where(top, t, hi)
    lo = np.where(top, t - 2 * eps, lo)
    bottom = lo < 0.0
    lo = np.where(bottom, t, lo)
    hi = np.where(bottom, t + 2 * eps, hi)
    if np.any(lo < 0.0) or np.any(hi > 1.0):
        raise DomainError("finite-difference times leave [0, 1]")
    return hi, lo


def fd_total_derivative(fn, x_t, t, tangent, eps: float) -> np.ndarray:
    """Central difference of fn along (dx, dt) = (tangent, 1).

    Falls back to a one-sided stencil of the same width when t +/- eps
    leaves [0, 1]. Calls `fn(x, t)` exactly twice.
    """
    t = np.asarray(t, dtype=np.float64)
    hi, lo = _fd_times(t, eps)
    col = (lambda s: s[:, None]) if np.ndim(x_t) == 2 else (lambda s: s)
    f_hi = fn(x_t + col(hi - t) * tangent, hi)
    f_lo = fn(x_t + col(lo - t) * tangent, lo)
    return (f_hi - f_lo) / (2.0 * eps)


def flowmap_time_derivative_fd(model, snapshot, x_t, t, tangent_v, c, fd: FdConfig):
    """d/dt of the snapshot's u-head along the trajectory with slope tangent_v."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("t must lie in [0, 1]")

    def u_at(x, s):
        return model.forward(snapshot, x, s, c=c)[0].u

    return fd_total_derivative(u_at, x_t, t, tangent_v, fd.epsilon)


def flowmap_target(v_enh, t, dudt) -> np.ndarray:
    """u target = v_enh - t * du/dt (returned as a fresh, detached array)."""
    t = np.asarray(t, dtype=np.float64)
    tc = t[:, None] if np.ndim(v_enh) == 2 and t.ndim == 1 else t
    return np.array(v_enh - tc * dudt)


def _sq(diff: np.ndarray) -> np.ndarray:
    return np.sum(diff * diff, axis=1)


def _check_finite(*vals, what="loss"):
    for v in vals:
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"non-finite {what}")


@dataclass
class DumoTargets:
    out: object
    cache: object
    v_enh: np.ndarray
    u_tgt: np.ndarray
    grad_free: int


def dumo_targets(mlp: Mlp, params, snapshot, batch: Batch, guidance: GuidanceConfig, fd: FdConfig):
    """Main (tracked) forward plus the detached targets of one dual-head step."""
    if mlp.config.num_heads != 2:
        raise StructuralError("dual-head objective needs num_heads=2")
    _check_guidance(mlp, guidance)
    xt, t, c = batch.xt, batch.t, batch.c
    out, cache = mlp.forward(params, xt, t, c=c, keep_cache=True)
    free = 0
    v_enh = batch.v
    if guidance.zeta != 0.0:
        v_unc = mlp.forward(snapshot, xt, t, c=_null_labels(mlp, c))[0].v
        free += 1
        # the main forward already holds v_theta; reuse it detached
        v_enh = enhance_velocity(v_enh, out.v.copy(), v_unc, guidance.zeta)
    dudt = flowmap_time_derivative_fd(mlp, snapshot, xt, t, v_enh, c, fd)
    free += 2
    u_tgt = flowmap_target(v_enh, t, dudt)
    return DumoTargets(out, cache, v_enh, u_tgt, free)


def dual_head_loss(v, u, v_tgt, u_tgt, beta: float):
    """(total, l_v, l_u, grad_v, grad_u) for fixed targets."""
    b = v.shape[0]
    dv = v - v_tgt
    du = u - u_tgt
    l_v = float(np.sum(_sq(dv)) / b)
    l_u = float(np.sum(_sq(du)) / b)
    total = beta * l_v + (1.0 - beta) * l_u
    return total, l_v, l_u, (2.0 * beta / b) * dv, (2.0 * (1.0 - beta) / b) * du


def dumo_loss_and_grad(
    mlp: Mlp,
    params,
    snapshot,
    batch: Batch,
    beta: float,
    guidance: GuidanceConfig = GuidanceConfig(),
    fd: FdConfig = FdConfig(),
):
    """beta * |v - v_enh|^2 + (1 - beta) * |u - (v_enh - t du-/dt)|^2 and its gradient."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    tg = dumo_targets(mlp, params, snapshot, batch, guidance, fd)
    total, l_v, l_u, gv, gu = dual_head_loss(tg.out.v, tg.out.u, tg.v_enh, tg.u_tgt, beta)
    _check_finite(total)
    grad = mlp.backprop(params, tg.cache, gv, gu)
    _check_finite(grad, what="gradient")
    return LossBreakdown(total, l_v, l_u, tg.grad_free, 1), grad


def _time_args(mlp: Mlp, t, r):
    return {"r": r} if mlp.config.num_time_inputs == 2 else {}


def _single_output_loss(pred, target):
    b = pred.shape[0]
    diff = pred - target
    return _sq(diff), (2.0 / b) * diff


def flow_matching_loss_and_grad(mlp: Mlp, params, snapshot, batch: Batch, guidance: GuidanceConfig = GuidanceConfig()):
    """Plain velocity regression on the v-head (r = t for two-time models)."""
    _check_guidance(mlp, guidance)
    xt, t, c = batch.xt, batch.t, batch.c
    targs = _time_args(mlp, t, t)
    out, cache = mlp.forward(params, xt, t, c=c, keep_cache=True, **targs)
    free = 0
    v_enh = batch.v
    if guidance.zeta != 0.0:
        v_unc = mlp.forward(snapshot, xt, t, c=_null_labels(mlp, c), **targs)[0].v
        free += 1
        v_enh = enhance_velocity(v_enh, out.v.copy(), v_unc, guidance.zeta)
    sq, gv = _single_output_loss(out.v, v_enh)
    total = float(np.sum(sq) / len(batch))
    _check_finite(total)
    grad = mlp.backprop(params, cache, gv)
    _check_finite(grad, what="gradient")
    return LossBreakdown(total, total, 0.0, free, 1), grad


def single_branch_loss_and_grad(
    mlp: Mlp,
    params,
    snapshot,
    batch: Batch,
    baseline: BaselineConfig,
    guidance: GuidanceConfig = GuidanceConfig(),
    fd: FdConfig = FdConfig(),
):
    """Per-item mixture of velocity regression (p < rho, r = t) and the
    interval flow-map objective (p >= rho, r = 0) on one (t, r) head."""
    cfg = mlp.config
    if cfg.num_heads != 1 or cfg.num_time_inputs != 2:
        raise StructuralError("single-branch objective needs num_heads=1, num_time_inputs=2")
    if batch.route is None:
        raise StructuralError("single-branch batch needs routing draws")
    _check_guidance(mlp, guidance)
    xt, t, c = batch.xt, batch.t, batch.c
    vel = batch.route < baseline.rho
    r = np.where(vel, t, 0.0)
    out, cache = mlp.forward(params, xt, t, r=r, c=c, keep_cache=True)
    free = 0
    v_enh = batch.v
    if guidance.zeta != 0.0:
        # the main output is an average velocity for r=0 items, so the
        # instantaneous estimate needs its own r=t pass
        v_cond = mlp.forward(snapshot, xt, t, r=t, c=c)[0].v
        v_unc = mlp.forward(snapshot, xt, t, r=t, c=_null_labels(mlp, c))[0].v
        free += 2
        v_enh = enhance_velocity(v_enh, v_cond, v_unc, guidance.zeta)

    def f_at(x, s):
        return mlp.forward(snapshot, x, s, r=r, c=c)[0].v

    dfdt = fd_total_derivative(f_at, xt, t, v_enh, fd.epsilon)
    free += 2
    target = np.where(vel[:, None], v_enh, v_enh - (t - r)[:, None] * dfdt)
    sq, g = _single_output_loss(out.v, target)
    b = len(batch)
    total = float(np.sum(sq) / b)
    l_v = float(np.sum(np.where(vel, sq, 0.0)) / b)
    l_u = float(np.sum(np.where(vel, 0.0, sq)) / b)
    _check_finite(total)
    grad = mlp.backprop(params, cache, g)
    _check_finite(grad, what="gradient")
    return LossBreakdown(total, l_v, l_u, free, 1), grad


def surrogate_loss(mlp: Mlp, params, snapshot, batch: Batch, lam: float):
    """Flow-matching term plus lam/(1-lam) times the self-alignment term.

    Returns (total, fm_term, align_term), evaluated on the v-head.
    """
    if not 0.0 < lam < 1.0:
        raise DomainError(f"lambda must lie in (0, 1), got {lam}")
    x, z, t, c = batch.x, batch.z, batch.t, batch.c
    lt = lam * t

    def f(p, xx, tt):
        return mlp.forward(p, xx, tt, c=c, **_time_args(mlp, tt, tt))[0].v

    pred = f(params, interpolate(x, z, t), t)
    fm = float(np.mean(_sq(pred - (z - x))))
    align = float(np.mean(_sq(pred - f(snapshot, interpolate(x, z, lt), lt))))
    return fm + lam / (1.0 - lam) * align, fm, align


def dumo_grad_check(
    mlp: Mlp,
    params,
    snapshot,
    batch: Batch,
    beta: float,
    guidance: GuidanceConfig = GuidanceConfig(),
    fd: FdConfig = FdConfig(),
    fd_step: float = 1e-6,
) -> float:
    """Max relative error of the dual-head gradient against central differences.

    Targets are computed once and held fixed, which is exactly the function
    the analytic gradient differentiates (stop-gradient semantics).
    """
    tg = dumo_targets(mlp, params, snapshot, batch, guidance, fd)
    *_, gv, gu = dual_head_loss(tg.out.v, tg.out.u, tg.v_enh, tg.u_tgt, beta)
    analytic = mlp.backprop(params, tg.cache, gv, gu)
    xt, t, c = batch.xt, batch.t, batch.c

    def loss(p):
        out = mlp.forward(p, xt, t, c=c)[0]
        return dual_head_loss(out.v, out.u, tg.v_enh, tg.u_tgt, beta)[0]

    return grad_check(loss, params, analytic, fd_step)
