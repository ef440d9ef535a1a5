"""Dense MLP with a shared backbone and one or two linear output heads.

Parameters live in one flat float array; `Mlp.layout` maps layer names to
slices of it. That makes snapshots (`params.copy()`), EMA shadows and the
optimizer trivially congruent, and lets finite-difference checks walk every
scalar.

Backbone::

    e      = sin/cos(omega * t)  [+ sin/cos(omega * r) @ r_proj]  [+ class_emb[c]]
    h_0    = [x_t, e]
    h_l    = silu(h_{l-1} @ W_l + b_l)        l = 1..depth
    v      = h_depth @ W_v + b_v
    u      = h_depth @ W_u + b_u             (num_heads == 2)
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, StructuralError


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int = 2
    hidden_dim: int = 256
    depth: int = 4
    time_embed_dim: int = 64
    num_classes: int = 0
    num_heads: int = 2
    num_time_inputs: int = 1
    freq_min: float = 1.0
    freq_max: float = 10.0

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "depth", "time_embed_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even (sin/cos pairs)")
        if self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")
        if self.num_heads not in (1, 2):
            raise ConfigError("num_heads must be 1 or 2")
        if self.num_time_inputs not in (1, 2):
            raise ConfigError("num_time_inputs must be 1 or 2")
        if not 0 < self.freq_min <= self.freq_max:
            raise ConfigError("need 0 < freq_min <= freq_max")

    @property
    def null_class(self) -> int:
        """Index of the extra 'no label' row in the class table."""
        return self.num_classes


def param_count(config: MlpConfig) -> int:
    """Closed-form parameter count, independent of `Mlp.layout`."""
    d, h, e = config.input_dim, config.hidden_dim, config.time_embed_dim
    n = (d + e) * h + h
    n += (config.depth - 1) * (h * h + h)
    n += config.num_heads * (h * d + d)
    if config.num_classes > 0:
        n += (config.num_classes + 1) * e
    if config.num_time_inputs == 2:
        n += e * e
    return n


def param_overhead(config: MlpConfig) -> float:
    """Share of all parameters that belongs to the second (flow-map) head."""
    if config.num_heads != 2:
        raise ConfigError("param_overhead needs a two-head config")
    return config.input_dim * (config.hidden_dim + 1) / param_count(config)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # exp overflow for a << 0 yields 1/inf = 0, which is the correct limit
    with np.errstate(over="ignore"):
        s = np.exp(-a)
    s += 1.0
    return np.reciprocal(s, out=s)


class DualOutput(NamedTuple):
    v: np.ndarray
    u: np.ndarray | None


@dataclass
class ForwardCache:
    hs: list[np.ndarray]
    pre: list[np.ndarray]
    sig: list[np.ndarray]
    c: np.ndarray | None = None
    r_feat: np.ndarray | None = None


class Mlp:
    def __init__(self, config: MlpConfig, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        k = config.time_embed_dim // 2
        self.freqs = np.geomspace(config.freq_min, config.freq_max, k).astype(self.dtype)
        self.layout: dict[str, tuple[slice, tuple[int, ...]]] = {}
        off = 0
        for name, shape in self._shapes():
            size = int(np.prod(shape))
            self.layout[name] = (slice(off, off + size), shape)
            off += size
        self.size = off

    def _shapes(self):
        cfg = self.config
        d, h, e = cfg.input_dim, cfg.hidden_dim, cfg.time_embed_dim
        yield "l0.W", (d + e, h)
        yield "l0.b", (h,)
        for i in range(1, cfg.depth):
            yield f"l{i}.W", (h, h)
            yield f"l{i}.b", (h,)
        yield "head_v.W", (h, d)
        yield "head_v.b", (d,)
        if cfg.num_heads == 2:
            yield "head_u.W", (h, d)
            yield "head_u.b", (d,)
        if cfg.num_classes > 0:
            yield "class_emb", (cfg.num_classes + 1, e)
        if cfg.num_time_inputs == 2:
            yield "r_proj", (e, e)

    def views(self, params: np.ndarray) -> dict[str, np.ndarray]:
        if params.shape != (self.size,):
            raise StructuralError(f"expected {self.size} parameters, got {params.shape}")
        return {name: params[sl].reshape(shape) for name, (sl, shape) in self.layout.items()}

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Weights ~ N(0, 1/fan_in), biases zero, class embeddings ~ N(0, 1).

        Draw order follows the layout, so the backbone and v-head of a
        one-head and a two-head model built from the same seed coincide.
        """
        params = np.zeros(self.size, dtype=np.float64)
        for name, (sl, shape) in self.layout.items():
            if name.endswith(".b"):
                continue
            scale = 1.0 if name == "class_emb" else 1.0 / np.sqrt(shape[0])
            params[sl] = rng.standard_normal(int(np.prod(shape))) * scale
        return params.astype(self.dtype)

    def time_features(self, t: np.ndarray) -> np.ndarray:
        arg = np.asarray(t, dtype=self.dtype)[:, None] * self.freqs
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)

    def _check_inputs(self, x, t, r, c):
        cfg = self.config
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise StructuralError(f"x must have shape (B, {cfg.input_dim}), got {x.shape}")
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=self.dtype), (b,))
        if (r is None) != (cfg.num_time_inputs == 1):
            raise StructuralError(
                "second time input r is required" if r is None else "this model takes no r input"
            )
        if r is not None:
            r = np.broadcast_to(np.asarray(r, dtype=self.dtype), (b,))
        if (c is None) != (cfg.num_classes == 0):
            raise StructuralError(
                "class labels are required" if c is None else "unconditional model got labels"
            )
        if c is not None:
            c = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))
            if np.any(c < 0) or np.any(c > cfg.num_classes):
                raise StructuralError("class index out of range")
        return x, t, r, c

    def forward(self, params, x, t, r=None, c=None, keep_cache: bool = False):
        """Evaluate both heads for a batch. Returns (DualOutput, ForwardCache | None)."""
        x, t, r, c = self._check_inputs(x, t, r, c)
        w = self.views(params)
        emb = self.time_features(t)
        r_feat = None
        if r is not None:
            r_feat = self.time_features(r)
            emb = emb + r_feat @ w["r_proj"]
        if c is not None:
            emb = emb + w["class_emb"][c]
        h = np.concatenate([x, emb], axis=1)
        hs, pre, sig = [h], [], []
        for i in range(self.config.depth):
            a = h @ w[f"l{i}.W"]
            a += w[f"l{i}.b"]
            s = _sigmoid(a)
            h = a * s
            if keep_cache:
                pre.append(a)
                sig.append(s)
                hs.append(h)
        v = h @ w["head_v.W"] + w["head_v.b"]
        u = h @ w["head_u.W"] + w["head_u.b"] if self.config.num_heads == 2 else None
        cache = ForwardCache(hs, pre, sig, c, r_feat) if keep_cache else None
        return DualOutput(v, u), cache

    def backprop(self, params, cache: ForwardCache, grad_v, grad_u=None) -> np.ndarray:
        """Vector-Jacobian product: gradient of sum(grad_v*v) + sum(grad_u*u) w.r.t. params."""
        if not cache.pre:
            raise StructuralError("forward was run without keep_cache=True")
        cfg = self.config
        w = self.views(params)
        grad = np.zeros(self.size, dtype=self.dtype)
        g = self.views(grad)
        h_last = cache.hs[-1]
        grad_v = np.asarray(grad_v, dtype=self.dtype)
        if grad_v.shape != (h_last.shape[0], cfg.input_dim):
            raise StructuralError(f"grad_v has shape {grad_v.shape}")
        g["head_v.W"][...] = h_last.T @ grad_v
        g["head_v.b"][...] = grad_v.sum(axis=0)
        gh = grad_v @ w["head_v.W"].T
        if grad_u is not None:
            if cfg.num_heads != 2:
                raise StructuralError("grad_u given for a one-head model")
            grad_u = np.asarray(grad_u, dtype=self.dtype)
            if grad_u.shape != grad_v.shape:
                raise StructuralError(f"grad_u has shape {grad_u.shape}")
            g["head_u.W"][...] = h_last.T @ grad_u
            g["head_u.b"][...] = grad_u.sum(axis=0)
            gh = gh + grad_u @ w["head_u.W"].T
        need_emb = cfg.num_classes > 0 or cfg.num_time_inputs == 2
        for i in reversed(range(cfg.depth)):
            a, s = cache.pre[i], cache.sig[i]
            ga = gh * (s * (1.0 + a * (1.0 - s)))
            g[f"l{i}.W"][...] = cache.hs[i].T @ ga
            g[f"l{i}.b"][...] = ga.sum(axis=0)
            if i > 0:
                gh = ga @ w[f"l{i}.W"].T
            elif need_emb:
                g_emb = ga @ w["l0.W"][cfg.input_dim:].T
                if cache.c is not None:
                    np.add.at(g["class_emb"], cache.c, g_emb)
                if cache.r_feat is not None:
                    g["r_proj"][...] = cache.r_feat.T @ g_emb
        return grad


def grad_check(
    loss_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic: np.ndarray,
    fd_step: float = 1e-6,
) -> float:
    """Max relative error between `analytic` and central differences of `loss_fn`.

    Per coordinate the error is |a - n| / max(|a|, |n|, floor), where floor is
    1e-3 of the largest numeric entry (plus 1e-8). Without the floor, entries
    many orders below the gradient scale are pure FD roundoff.
    """
    params = np.array(params, dtype=np.float64)
    numeric = np.empty_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + fd_step
        fp = loss_fn(params)
        params[i] = old - fd_step
        fm = loss_fn(params)
        params[i] = old
        numeric[i] = (fp - fm) / (2.0 * fd_step)
    floor = 1e-3 * np.abs(numeric).max() + 1e-8
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(err.max())


# Checkpoints: 8-byte magic, u64 header length, JSON header, then the
# named little-endian f64 arrays back to back in header order.
_MAGIC = b"DUMOCKPT"


def save_checkpoint(path, mlp: Mlp, arrays: dict[str, np.ndarray], meta: dict | None = None):
    header = {
        "format": 1,
        "mlp_config": asdict(mlp.config),
        "dtype": mlp.dtype.name,
        "index_map": {k: [sl.start, sl.stop, list(shape)] for k, (sl, shape) in mlp.layout.items()},
        "arrays": [[name, int(a.size)] for name, a in arrays.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Mlp, dict[str, np.ndarray], dict]:
    """Inverse of `save_checkpoint`. Returns (mlp, arrays, meta)."""
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise ConfigError(f"{path} is not a dumo_lab checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n))
        arrays = {}
        for name, size in header["arrays"]:
            arrays[name] = np.frombuffer(f.read(8 * size), dtype="<f8").astype(np.float64)
    mlp = Mlp(MlpConfig(**header["mlp_config"]), dtype=header.get("dtype", "float64"))
    for name in arrays:
        if arrays[name].size == mlp.size and mlp.dtype != np.float64:
            arrays[name] = arrays[name].astype(mlp.dtype)
    return mlp, arrays, header["meta"]
