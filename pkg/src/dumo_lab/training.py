"""Training loop shared by the three paradigms."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import eval as mmd_eval
from .data import Dataset2D
from .errors import ConfigError, DivergenceError
from .network import Mlp, MlpConfig
from .objectives import (
    BaselineConfig,
    Batch,
    FdConfig,
    GuidanceConfig,
    dumo_loss_and_grad,
    flow_matching_loss_and_grad,
    single_branch_loss_and_grad,
)
from .sampling import ModelHandle, SampleConfig, generate
from .transport import TimeDistribution, sample_time

log = logging.getLogger(__name__)

PARADIGMS = ("flow-matching", "single-branch", "dumo")


@dataclass
class TrainConfig:
    paradigm: str = "dumo"
    beta: float = 0.7
    rho: float = 0.8
    zeta: float = 0.0
    p_uncond: float = 0.1
    conditional: bool = False
    theta1: float = 2.0
    theta2: float = 2.0
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.0
    eps_adam: float = 1e-8
    batch_size: int = 256
    steps: int = 10000
    ema_decay: float = 0.999
    fd_epsilon: float = 0.005
    seed: int = 0
    eval_every: int = 1000
    eval_nfe: int = 1
    eval_mode: str = "auto"
    eval_live: bool = False
    divergence_ceiling: float = 0.25
    hidden_dim: int = 256
    depth: int = 4
    time_embed_dim: int = 64
    freq_min: float = 1.0
    freq_max: float = 10.0
    num_time_inputs: int | None = None
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self):
        errs = []
        if self.paradigm not in PARADIGMS:
            errs.append(f"paradigm must be one of {PARADIGMS}")
        for name in ("beta", "rho"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.zeta < 1.0:
            errs.append("zeta must lie in [0, 1)")
        if self.zeta > 0 and not self.conditional:
            errs.append("zeta > 0 needs conditional=true (guidance rule: unconditional data cannot be guided)")
        if not 0.0 <= self.p_uncond < 1.0:
            errs.append("p_uncond must lie in [0, 1)")
        for name in ("theta1", "theta2", "lr", "fd_epsilon"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                errs.append(f"{name} must lie in (0, 1)")
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            errs.append("ema_decay must lie in [0, 1)")
        for name in ("batch_size", "steps", "eval_every", "eval_nfe", "hidden_dim", "depth", "time_embed_dim"):
            if not (isinstance(getattr(self, name), int) and getattr(self, name) > 0):
                errs.append(f"{name} must be a positive integer")
        if self.eval_mode not in ("auto", "flowmap", "euler"):
            errs.append("eval_mode must be auto, flowmap or euler")
        if self.num_time_inputs not in (None, 1, 2):
            errs.append("num_time_inputs must be null, 1 or 2")
        if self.dtype not in ("float64", "float32"):
            errs.append("dtype must be float64 or float32")
        if errs:
            raise ConfigError("; ".join(errs))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def mlp_config(self, num_classes: int = 0) -> MlpConfig:
        heads, times = {"dumo": (2, 1), "single-branch": (1, 2), "flow-matching": (1, 1)}[self.paradigm]
        if self.num_time_inputs is not None:
            times = self.num_time_inputs
        return MlpConfig(
            hidden_dim=self.hidden_dim,
            depth=self.depth,
            time_embed_dim=self.time_embed_dim,
            freq_min=self.freq_min,
            freq_max=self.freq_max,
            num_classes=num_classes,
            num_heads=heads,
            num_time_inputs=times,
        )


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adamw_step(params, grads, state: OptimizerState, lr, beta1=0.9, beta2=0.95, weight_decay=0.0, eps_adam=1e-8):
    """Adam with bias correction and decoupled weight decay. Updates in place."""
    if not np.all(np.isfinite(grads)):
        raise DivergenceError("non-finite gradient", step=state.step + 1)
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * np.square(grads)
    if weight_decay:
        params -= lr * weight_decay * params
    denom = np.sqrt(state.v / (1.0 - beta2**state.step))
    denom += eps_adam
    params -= (lr / (1.0 - beta1**state.step)) * state.m / denom
    return params, state


def ema_update(shadow, params, decay):
    shadow *= decay
    shadow += (1.0 - decay) * params
    return shadow


@dataclass
class MetricsRecord:
    step: int
    l_v: float
    l_u: float
    total: float
    grad_norm: float
    grad_tracking_passes: int
    grad_free_passes: int
    mmd: float | None = None
    mmd_live: float | None = None
    diverged: bool = False
    wall_clock: float = field(default=0.0, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        # wall-clock breaks byte-identical logs; it is kept in memory only
        d.pop("wall_clock")
        if d["mmd_live"] is None:
            d.pop("mmd_live")
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainResult:
    mlp: Mlp
    params: np.ndarray
    ema: np.ndarray
    log: list[MetricsRecord]
    diverged: bool
    opt_state: OptimizerState
    final_mmd: float | None
    rng_state: dict


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "data", "noise", "time", "route", "drop", "eval")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def eval_sample_config(cfg: TrainConfig, mlp: Mlp) -> SampleConfig:
    mode = cfg.eval_mode
    if mode == "auto":
        has_fm = mlp.config.num_heads == 2 or mlp.config.num_time_inputs == 2
        mode = "flowmap" if has_fm else "euler"
    nfe = cfg.eval_nfe if mode == "flowmap" else max(cfg.eval_nfe, 100)
    return SampleConfig(nfe=nfe, mode=mode, seed=cfg.seed)


def draw_labels(rng, ds: Dataset2D, n: int):
    return ds.labels[rng.integers(0, len(ds), n)]


def sample_model(mlp, params, n, rng, cfg: SampleConfig, ds: Dataset2D | None = None, conditional=False):
    z = rng.standard_normal((n, mlp.config.input_dim))
    c = draw_labels(rng, ds, n) if conditional else None
    handle = ModelHandle(mlp, params)
    return generate(handle, z, c, cfg, rng), handle


def _evaluate(mlp, params, cfg, ds, heldout, rng) -> float:
    n = mmd_eval.EVAL_POINTS * mmd_eval.EVAL_REPS
    with np.errstate(all="ignore"):
        gen, _ = sample_model(mlp, params, n, rng, eval_sample_config(cfg, mlp), ds, cfg.conditional)
    if not np.all(np.isfinite(gen)):
        return math.inf
    return mmd_eval.evaluate(gen, heldout)["mmd"]


def make_batch(cfg: TrainConfig, ds: Dataset2D, rngs, mlp: Mlp) -> Batch:
    b = cfg.batch_size
    idx = rngs["data"].integers(0, len(ds), b)
    x = ds.points[idx]
    c = None
    if cfg.conditional:
        c = ds.labels[idx].copy()
        c[rngs["drop"].random(b) < cfg.p_uncond] = mlp.config.null_class
    z = rngs["noise"].standard_normal(x.shape)
    t = sample_time(rngs["time"], TimeDistribution(cfg.theta1, cfg.theta2), b)
    route = rngs["route"].random(b) if cfg.paradigm == "single-branch" else None
    return Batch(x, z, t, c, route)


def loss_and_grad(cfg: TrainConfig, mlp: Mlp, params, snapshot, batch: Batch):
    guidance = GuidanceConfig(cfg.zeta, cfg.p_uncond)
    fd = FdConfig(cfg.fd_epsilon)
    if cfg.paradigm == "dumo":
        return dumo_loss_and_grad(mlp, params, snapshot, batch, cfg.beta, guidance, fd)
    if cfg.paradigm == "single-branch":
        return single_branch_loss_and_grad(mlp, params, snapshot, batch, BaselineConfig(cfg.rho), guidance, fd)
    return flow_matching_loss_and_grad(mlp, params, snapshot, batch, guidance)


def train(cfg: TrainConfig, ds: Dataset2D, heldout: np.ndarray | None = None, metrics_path=None, on_eval=None) -> TrainResult:
    """Run `cfg.steps` optimizer steps; stops early on the first non-finite value.

    MMD of the EMA weights against `heldout` is logged every `eval_every`
    steps and at the last step. Each metrics record is also appended to
    `metrics_path` as one JSON line.
    """
    if cfg.conditional and ds.labels is None:
        raise ConfigError("conditional=true needs a labelled dataset")
    rngs = _streams(cfg.seed)
    mlp = Mlp(cfg.mlp_config(ds.num_classes if cfg.conditional else 0), dtype=cfg.dtype)
    params = mlp.init_params(rngs["init"])
    ema = params.copy()
    opt = OptimizerState.zeros_like(params)
    records: list[MetricsRecord] = []
    diverged = False
    final_mmd = None
    sink = open(metrics_path, "w") if metrics_path is not None else None
    t0 = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            batch = make_batch(cfg, ds, rngs, mlp)
            snapshot = params.copy()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    lb, grad = loss_and_grad(cfg, mlp, params, snapshot, batch)
                if not math.isfinite(lb.total):
                    raise DivergenceError("non-finite loss", step=step)
                adamw_step(params, grad, opt, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay, cfg.eps_adam)
            except DivergenceError:
                diverged = True
                rec = MetricsRecord(step, math.nan, math.nan, math.nan, math.nan, 1, 0, diverged=True,
                                    wall_clock=time.perf_counter() - t0)
                records.append(rec)
                if sink:
                    sink.write(rec.to_json() + "\n")
                log.warning("diverged at step %d", step)
                break
            ema_update(ema, params, cfg.ema_decay)
            rec = MetricsRecord(
                step, lb.l_v, lb.l_u, lb.total, float(np.linalg.norm(grad)),
                lb.grad_tracking_passes, lb.grad_free_passes,
            )
            if heldout is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
                rec.mmd = _evaluate(mlp, ema, cfg, ds, heldout, rngs["eval"])
                if cfg.eval_live:
                    rec.mmd_live = _evaluate(mlp, params, cfg, ds, heldout, rngs["eval"])
                final_mmd = rec.mmd
                if on_eval is not None:
                    on_eval(step, mlp, params, ema, opt)
            rec.wall_clock = time.perf_counter() - t0
            records.append(rec)
            if sink:
                sink.write(rec.to_json() + "\n")
    finally:
        if sink:
            sink.close()
    return TrainResult(mlp, params, ema, records, diverged, opt, final_mmd, rngs["noise"].bit_generator.state)
