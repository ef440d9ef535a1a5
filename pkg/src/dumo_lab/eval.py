"""Squared maximum mean discrepancy with a Gaussian RBF kernel."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ConfigError, DataError

MEDIAN_SUBSAMPLE = 2000


@dataclass(frozen=True)
class MmdConfig:
    bandwidth: float | str = "median"
    estimator: str = "unbiased"

    def __post_init__(self):
        if self.estimator not in ("biased", "unbiased"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ConfigError(f"unknown bandwidth rule {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")


def median_heuristic(X, Y, seed: int = 0, max_points: int = MEDIAN_SUBSAMPLE) -> float:
    """Median nonzero pairwise distance of the pooled sample, divided by sqrt(2).

    With bw = median / sqrt(2) the kernel exp(-d^2 / (2 bw^2)) equals
    exp(-d^2 / median^2).
    """
    Z = np.concatenate([np.atleast_2d(X), np.atleast_2d(Y)])
    if Z.shape[0] < 2:
        raise ConfigError("median heuristic needs at least two points")
    if Z.shape[0] > max_points:
        idx = np.sort(np.random.default_rng(seed).choice(Z.shape[0], max_points, replace=False))
        Z = Z[idx]
    d = pdist(Z)
    d = d[d > 0]
    if d.size == 0:
        raise DataError("all points coincide; bandwidth is degenerate")
    return float(np.median(d)) / math.sqrt(2.0)


def _kernels(X, Y, bw):
    g = 1.0 / (2.0 * bw * bw)
    kxx = np.exp(-g * cdist(X, X, "sqeuclidean"))
    kyy = np.exp(-g * cdist(Y, Y, "sqeuclidean"))
    kxy = np.exp(-g * cdist(X, Y, "sqeuclidean"))
    return kxx, kyy, kxy


def _resolve_bw(X, Y, cfg: MmdConfig) -> float:
    return median_heuristic(X, Y) if cfg.bandwidth == "median" else float(cfg.bandwidth)


def _check_sets(X, Y):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise ConfigError("MMD needs at least two points per set")
    if X.shape[1] != Y.shape[1]:
        raise DataError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return X, Y


def mmd(X, Y, cfg: MmdConfig = MmdConfig()) -> float:
    X, Y = _check_sets(X, Y)
    bw = _resolve_bw(X, Y, cfg)
    return _mmd_from_kernels(*_kernels(X, Y, bw), cfg.estimator)


def _mmd_from_kernels(kxx, kyy, kxy, estimator):
    n, m = kxx.shape[0], kyy.shape[0]
    if estimator == "biased":
        return float(kxx.sum() / n**2 + kyy.sum() / m**2 - 2.0 * kxy.sum() / (n * m))
    sx = kxx.sum() - np.trace(kxx)
    sy = kyy.sum() - np.trace(kyy)
    return float(sx / (n * (n - 1)) + sy / (m * (m - 1)) - 2.0 * kxy.sum() / (n * m))


def mmd_bruteforce(X, Y, bandwidth: float, estimator: str = "unbiased") -> float:
    """O(n^2) double loop over pure-Python floats; reference for `mmd`."""
    X = [list(map(float, p)) for p in np.atleast_2d(X)]
    Y = [list(map(float, p)) for p in np.atleast_2d(Y)]
    g = 1.0 / (2.0 * bandwidth * bandwidth)

    def k(a, b):
        return math.exp(-g * sum((ai - bi) ** 2 for ai, bi in zip(a, b)))

    def within(S):
        tot = 0.0
        for i, a in enumerate(S):
            for j, b in enumerate(S):
                if estimator == "biased" or i != j:
                    tot += k(a, b)
        n = len(S)
        return tot / (n * n if estimator == "biased" else n * (n - 1))

    cross = sum(k(a, b) for a in X for b in Y) / (len(X) * len(Y))
    return within(X) + within(Y) - 2.0 * cross


def mmd_null_se(kxx, kyy, kxy) -> float:
    """Leading-order standard error of the unbiased estimate under X ~ Y (n = m)."""
    n = kxx.shape[0]
    h = kxx + kyy - kxy - kxy.T
    np.fill_diagonal(h, 0.0)
    return math.sqrt(2.0 * float(np.sum(h * h)) / (n * (n - 1)) / (n * (n - 1)))


# Fixed evaluation protocol: 2000 generated vs 2000 held-out points,
# three repetitions, median-heuristic bandwidth on the pooled sample.
EVAL_POINTS = 2000
EVAL_REPS = 3


def evaluate(
    generated, reference, cfg: MmdConfig = MmdConfig(), n: int = EVAL_POINTS, reps: int = EVAL_REPS, seed: int = 0
) -> dict:
    """Average MMD over `reps` chunks of n points from each set.

    Both sets are shuffled once with a fixed seed, so the result does not
    depend on row order; rep i then takes positions [i*n, (i+1)*n), wrapping
    around if a set has fewer than reps*n points.
    """
    G, R = _check_sets(generated, reference)
    rng = np.random.default_rng(seed)
    G = G[rng.permutation(G.shape[0])]
    R = R[rng.permutation(R.shape[0])]
    values, ses, bws = [], [], []
    for i in range(reps):
        gi = G[np.arange(i * n, (i + 1) * n) % G.shape[0]] if G.shape[0] > n else G
        ri = R[np.arange(i * n, (i + 1) * n) % R.shape[0]] if R.shape[0] > n else R
        bw = _resolve_bw(gi, ri, cfg)
        kk = _kernels(gi, ri, bw)
        values.append(_mmd_from_kernels(*kk, cfg.estimator))
        if kk[0].shape == kk[1].shape:
            ses.append(mmd_null_se(*kk))
        bws.append(bw)
    out = {
        "mmd": float(np.mean(values)),
        "mmd_reps": values,
        "bandwidth": bws,
        "estimator": cfg.estimator,
        "n_points": int(min(n, G.shape[0])),
        "reps": reps,
    }
    if ses:
        out["mmd_se"] = float(math.sqrt(np.mean(np.square(ses)) / len(ses)))
    return out


def divergence_flag(log, ceiling: float | None = None):
    """(True, step) for the first non-finite loss, or for a final MMD above
    `ceiling` (strictly); otherwise (False, None)."""
    if not log:
        raise ConfigError("empty metrics log")
    for rec in log:
        rec = rec if isinstance(rec, dict) else vars(rec)
        for key in ("total", "l_v", "l_u"):
            val = rec.get(key)
            if val is not None and not math.isfinite(val):
                return True, rec["step"]
    if ceiling is not None:
        evals = [r if isinstance(r, dict) else vars(r) for r in log]
        evals = [r for r in evals if r.get("mmd") is not None]
        if evals and not evals[-1]["mmd"] <= ceiling:
            return True, evals[-1]["step"]
    return False, None
