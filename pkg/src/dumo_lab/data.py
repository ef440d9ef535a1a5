"""2D toy distributions, standardized to zero mean and unit per-axis variance."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class Dataset2D:
    points: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    name: str
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.points)):
            raise DataError("dataset contains non-finite points")
        if self.labels is not None and (
            np.any(self.labels < 0) or np.any(self.labels >= self.num_classes)
        ):
            raise DataError("labels out of range")

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def unnormalize(self, pts) -> np.ndarray:
        return np.asarray(pts) * self.scale + self.mean

    def normalize(self, pts) -> np.ndarray:
        return (np.asarray(pts) - self.mean) / self.scale


def _standardized(raw, labels, num_classes, name, standardize=True) -> Dataset2D:
    d = raw.shape[1]
    if standardize:
        mean = raw.mean(axis=0)
        scale = raw.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        pts = (raw - mean) / scale
    else:
        mean, scale, pts = np.zeros(d), np.ones(d), raw
    return Dataset2D(pts, labels, num_classes, name, mean, scale)


def make_moons(n: int, noise_sd: float = 0.1, rng=None, standardize: bool = True) -> Dataset2D:
    """Two interleaved half circles, n/2 points each in shuffled order, angles uniform on [0, pi].

    Upper arc (cos a, sin a) gets label 0, lower arc (1 - cos a, 0.5 - sin a)
    label 1.
    """
    if n % 2:
        raise ConfigError(f"make_moons needs an even n, got {n}")
    if noise_sd < 0:
        raise ConfigError("noise_sd must be >= 0")
    rng = np.random.default_rng(rng)
    half = n // 2
    a_up = rng.uniform(0.0, np.pi, half)
    a_lo = rng.uniform(0.0, np.pi, half)
    upper = np.stack([np.cos(a_up), np.sin(a_up)], axis=1)
    lower = np.stack([1.0 - np.cos(a_lo), 0.5 - np.sin(a_lo)], axis=1)
    raw = np.concatenate([upper, lower])
    if noise_sd > 0:
        raw = raw + noise_sd * rng.standard_normal(raw.shape)
    labels = np.repeat(np.array([0, 1]), half)
    order = rng.permutation(n)
    return _standardized(raw[order], labels[order], 2, "moons", standardize)


def make_gaussian_mixture(n: int, centers, sd: float = 0.1, rng=None, standardize: bool = True) -> Dataset2D:
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.shape[0] < 1:
        raise ConfigError("need at least one center")
    rng = np.random.default_rng(rng)
    k = centers.shape[0]
    labels = rng.integers(0, k, n)
    raw = centers[labels] + sd * rng.standard_normal((n, centers.shape[1]))
    return _standardized(raw, labels, k, "gaussian_mixture", standardize)


def ring_centers(k: int = 8, radius: float = 2.0) -> np.ndarray:
    a = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(a), np.sin(a)], axis=1)


def checkerboard_cell_ok(raw: np.ndarray) -> np.ndarray:
    """True where a point of [-2, 2]^2 lies in a permitted (dark) cell."""
    ij = np.floor(raw).astype(int) + 2
    inside = np.all((raw >= -2) & (raw < 2), axis=1)
    return inside & ((ij[:, 0] + ij[:, 1]) % 2 == 0)


def make_checkerboard(n: int, rng=None, standardize: bool = True) -> Dataset2D:
    """Uniform over the 8 permitted cells of a 4x4 board on [-2, 2]^2 (rejection)."""
    rng = np.random.default_rng(rng)
    out = np.empty((0, 2))
    while out.shape[0] < n:
        cand = rng.uniform(-2.0, 2.0, size=(2 * (n - out.shape[0]) + 8, 2))
        out = np.concatenate([out, cand[checkerboard_cell_ok(cand)]])
    return _standardized(out[:n], None, 0, "checkerboard", standardize)


def make_dataset(spec: dict, n: int | None = None, seed: int | None = None) -> Dataset2D:
    """Build a dataset from a JSON-style spec such as {"name": "moons", "noise_sd": 0.1}."""
    spec = dict(spec)
    name = spec.pop("name", "moons")
    n_spec, seed_spec = spec.pop("n", 10000), spec.pop("seed", 0)
    n = n_spec if n is None else n
    seed = seed_spec if seed is None else seed
    allowed = {"moons": {"noise_sd"}, "gaussian_mixture": {"centers", "k", "radius", "sd"}, "checkerboard": set()}
    if name not in allowed:
        raise ConfigError(f"unknown dataset {name!r}")
    extra = sorted(set(spec) - allowed[name])
    if extra:
        raise ConfigError(f"unknown keys for dataset {name!r}: {', '.join(extra)}")
    rng = np.random.default_rng(seed)
    if name == "moons":
        return make_moons(n, spec.get("noise_sd", 0.1), rng)
    if name == "gaussian_mixture":
        centers = spec.get("centers")
        if centers is None:
            centers = ring_centers(spec.get("k", 8), spec.get("radius", 2.0))
        return make_gaussian_mixture(n, centers, spec.get("sd", 0.1), rng)
    return make_checkerboard(n, rng)


def write_points_csv(path, points, labels=None):
    points = np.asarray(points)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        cols = [f"x{i}" for i in range(points.shape[1])]
        w.writerow(cols + (["class"] if labels is not None else []))
        for i, p in enumerate(points):
            row = [repr(float(v)) for v in p]
            if labels is not None:
                row.append(int(labels[i]))
            w.writerow(row)
    tmp.replace(path)


def read_points_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path} is empty")
    header = rows[0]
    if not header or not all(h.startswith("x") for h in header if h != "class"):
        raise DataError(f"{path}: unexpected header {header}")
    has_class = header[-1] == "class"
    d = len(header) - has_class
    try:
        pts = np.array([[float(v) for v in r[:d]] for r in rows[1:]], dtype=np.float64).reshape(-1, d)
        labels = np.array([int(r[d]) for r in rows[1:]]) if has_class else None
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: malformed row ({e})") from None
    return pts, labels


def save_dataset(path, ds: Dataset2D):
    """CSV of standardized points plus a JSON sidecar `<path>.json`."""
    write_points_csv(path, ds.points, ds.labels)
    side = {
        "name": ds.name,
        "labels": ds.labels is not None,
        "num_classes": ds.num_classes,
        "normalization": {"mean": ds.mean.tolist(), "scale": ds.scale.tolist()},
    }
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2))


def load_dataset(path) -> Dataset2D:
    pts, labels = read_points_csv(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    norm = side["normalization"]
    return Dataset2D(
        pts, labels, side["num_classes"], side["name"],
        np.asarray(norm["mean"]), np.asarray(norm["scale"]),
    )
