"""Command-line entry point: train, sweep, sample and eval subcommands.

Run configs are JSON documents:

    {"version": 1,
     "train":   {... TrainConfig fields ...},
     "dataset": {"name": "moons", "n": 10000, "noise_sd": 0.1, "seed": 0},
     "heldout": {"n": 6000, "seed": 1000000}}

Sweep specs add "axes" (TrainConfig field -> list of values) and
"replicates" (seeds base, base+1, ...). Unknown keys anywhere are errors.

Exit codes: 0 ok, 2 invalid input or refused overwrite, 3 divergence.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import multiprocessing as mp
import os
import shutil
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import eval as mmd_eval
from .data import make_dataset, read_points_csv, write_points_csv
from .errors import ConfigError, DataError, LabError
from .network import load_checkpoint, save_checkpoint
from .sampling import ModelHandle, SampleConfig, generate
from .training import TrainConfig, train

log = logging.getLogger("dumo_lab")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3
THREADS_ENV = "DUMO_LAB_THREADS"

DATASET_DEFAULTS = {
    "moons": {"n": 10000, "seed": 0, "noise_sd": 0.1},
    "gaussian_mixture": {"n": 10000, "seed": 0, "k": 8, "radius": 2.0, "sd": 0.1},
    "checkerboard": {"n": 10000, "seed": 0},
}
HELDOUT_DEFAULTS = {"n": 6000, "seed": 1_000_000}
RUN_KEYS = {"version", "train", "dataset", "heldout"}
SWEEP_KEYS = RUN_KEYS | {"axes", "replicates"}


def _check_keys(doc: dict, allowed: set, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = sorted(set(doc) - allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {', '.join(extra)}")


def resolve_run(doc: dict, allowed: set = RUN_KEYS) -> dict:
    """Validate a run document and fill in every default explicitly."""
    _check_keys(doc, allowed, "config")
    if doc.get("version") != SCHEMA_VERSION:
        raise ConfigError(f"config needs \"version\": {SCHEMA_VERSION}, got {doc.get('version')!r}")
    cfg = TrainConfig.from_dict(doc.get("train", {}))
    ds = dict(doc.get("dataset", {}))
    name = ds.setdefault("name", "moons")
    if name not in DATASET_DEFAULTS:
        raise ConfigError(f"unknown dataset {name!r}")
    ds = {**DATASET_DEFAULTS[name], **ds}
    held = dict(doc.get("heldout", {}))
    _check_keys(held, set(HELDOUT_DEFAULTS), "heldout")
    held = {**HELDOUT_DEFAULTS, **held}
    if held["seed"] == ds["seed"]:
        raise ConfigError("heldout seed must differ from the training dataset seed")
    return {"version": SCHEMA_VERSION, "train": cfg.to_dict(), "dataset": ds, "heldout": held}


def _prepare_out(path: Path, force: bool):
    if path.exists() and (path.is_file() or any(path.iterdir())):
        if not force:
            raise ConfigError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)


def _refuse_file(path: Path, force: bool):
    if path.exists() and not force:
        raise ConfigError(f"{path} already exists; pass --force to overwrite")


def run_training(resolved: dict, out: Path) -> dict:
    """Train one resolved config into `out`. Returns the run summary."""
    cfg = TrainConfig.from_dict(resolved["train"])
    ds = make_dataset(resolved["dataset"])
    held = make_dataset({**resolved["dataset"], **resolved["heldout"]}).points
    (out / "resolved-config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    ckpt = out / "checkpoint.bin"
    class_freq = None
    if cfg.conditional:
        class_freq = (np.bincount(ds.labels, minlength=ds.num_classes) / len(ds)).tolist()

    def meta(step, diverged=False):
        return {
            "step": step,
            "config": resolved,
            "normalization": {"mean": ds.mean.tolist(), "scale": ds.scale.tolist()},
            "class_freq": class_freq,
            "diverged": diverged,
        }

    def on_eval(step, mlp, params, ema, opt):
        save_checkpoint(ckpt, mlp, {"params": params, "ema": ema, "adam_m": opt.m, "adam_v": opt.v}, meta(step))

    t0 = time.perf_counter()
    res = train(cfg, ds, held, metrics_path=out / "metrics.jsonl", on_eval=on_eval)
    flagged, at = mmd_eval.divergence_flag([asdict(r) for r in res.log], cfg.divergence_ceiling)
    arrays = {"params": res.params, "ema": res.ema, "adam_m": res.opt_state.m, "adam_v": res.opt_state.v}
    save_checkpoint(ckpt, res.mlp, arrays, meta(res.log[-1].step, flagged))
    summary = {
        "final_mmd": res.final_mmd,
        "diverged": flagged,
        "divergence_step": at,
        "steps_run": res.log[-1].step,
        "wall_clock": time.perf_counter() - t0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_train(args) -> int:
    doc = _read_json(args.config)
    if args.seed is not None:
        doc.setdefault("train", {})["seed"] = args.seed
    resolved = resolve_run(doc)
    out = Path(args.out)
    _prepare_out(out, args.force)
    summary = run_training(resolved, out)
    log.info("final mmd %s, diverged=%s", summary["final_mmd"], summary["diverged"])
    return EXIT_DIVERGED if summary["diverged"] else EXIT_OK


def sweep_cells(axes: dict) -> list[dict]:
    if not axes:
        return [{}]
    names = list(axes)
    return [dict(zip(names, vals)) for vals in itertools.product(*(axes[n] for n in names))]


def _sweep_job(job):
    resolved, out = job
    try:
        return run_training(resolved, Path(out))
    except Exception as e:  # recorded per cell; the sweep keeps going
        return {"error": f"{type(e).__name__}: {e}", "final_mmd": None, "diverged": True}


def _median_key(summary) -> float:
    m = summary.get("final_mmd")
    if summary.get("diverged") or m is None or not np.isfinite(m):
        return float("inf")
    return float(m)


def run_sweep(doc: dict, out: Path, workers: int | None = None) -> list[dict]:
    """Run every (cell, replicate) pair and write grid.csv. Returns the grid rows."""
    _check_keys(doc, SWEEP_KEYS, "sweep spec")
    axes = doc.get("axes", {}) or {}
    _check_keys(axes, set(TrainConfig.__dataclass_fields__), "axes")
    for name, vals in axes.items():
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"axis {name!r} needs a non-empty list of values")
    reps = doc.get("replicates", 3)
    if not isinstance(reps, int) or reps < 1:
        raise ConfigError("replicates must be a positive integer")
    base = resolve_run({k: v for k, v in doc.items() if k in RUN_KEYS})
    base_seed = base["train"]["seed"]
    cells = sweep_cells(axes)

    jobs, index = [], []
    for ci, cell in enumerate(cells):
        for r in range(reps):
            train_doc = {**base["train"], **cell, "seed": base_seed + r}
            resolved = resolve_run({**base, "train": train_doc})
            run_dir = out / "runs" / f"cell{ci:03d}_seed{base_seed + r}"
            run_dir.mkdir(parents=True)
            jobs.append((resolved, str(run_dir)))
            index.append((ci, r))

    workers = workers or int(os.environ.get(THREADS_ENV, "1"))
    if workers > 1 and len(jobs) > 1:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        with ProcessPoolExecutor(min(workers, len(jobs)), mp_context=mp.get_context("spawn")) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]

    rows = []
    for ci, cell in enumerate(cells):
        runs = [results[k] for k, (c, _) in enumerate(index) if c == ci]
        row = {"cell": ci, **cell}
        row["median_mmd"] = statistics.median(_median_key(s) for s in runs)
        row["n_diverged"] = sum(bool(s.get("diverged")) for s in runs)
        for r, s in enumerate(runs):
            row[f"seed_{r}"] = base_seed + r
            row[f"mmd_{r}"] = s.get("final_mmd")
            row[f"diverged_{r}"] = bool(s.get("diverged"))
        errors = [s["error"] for s in runs if "error" in s]
        row["error"] = " | ".join(errors)
        rows.append(row)

    with open(out / "grid.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_sweep(args) -> int:
    doc = _read_json(args.spec)
    if args.seed is not None:
        doc.setdefault("train", {})["seed"] = args.seed
    out = Path(args.out)
    _prepare_out(out, args.force)
    rows = run_sweep(doc, out)
    for row in rows:
        log.info("cell %d: median mmd %.6g, diverged %d", row["cell"], row["median_mmd"], row["n_diverged"])
    return EXIT_OK


def sample_checkpoint(path, nfe=1, mode="flowmap", count=2000, seed=0, schedule=None, renoise="fresh", weights="ema"):
    mlp, arrays, meta = load_checkpoint(path)
    if weights not in ("ema", "params"):
        raise ConfigError("weights must be 'ema' or 'params'")
    cfg = SampleConfig(nfe=nfe, mode=mode, schedule=tuple(schedule) if schedule else None, renoise=renoise, seed=seed)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, mlp.config.input_dim))
    labels = None
    if mlp.config.num_classes:
        freq = meta.get("class_freq") or [1.0 / mlp.config.num_classes] * mlp.config.num_classes
        labels = rng.choice(mlp.config.num_classes, size=count, p=freq)
    handle = ModelHandle(mlp, arrays[weights])
    points = generate(handle, z, labels, cfg, rng)
    side = {
        "checkpoint": str(path),
        "nfe": nfe,
        "mode": mode,
        "seed": seed,
        "count": count,
        "schedule": list(cfg.time_grid()) if mode == "flowmap" else None,
        "renoise": renoise if mode == "flowmap" else None,
        "weights": weights,
        "passes": handle.point_passes,
        "forward_calls": handle.passes,
    }
    return points, labels, side


def cmd_sample(args) -> int:
    out = Path(args.out)
    side_path = Path(str(out) + ".json")
    _refuse_file(out, args.force)
    _refuse_file(side_path, args.force)
    schedule = [float(s) for s in args.schedule.split(",")] if args.schedule else None
    points, labels, side = sample_checkpoint(
        args.checkpoint, args.nfe, args.mode, args.count, args.seed, schedule, args.renoise, args.weights
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    write_points_csv(out, points, labels)
    side_path.write_text(json.dumps(side, indent=2) + "\n")
    log.info("wrote %d points to %s (%d forward passes)", len(points), out, side["passes"])
    return EXIT_OK


def evaluate_files(generated, reference=None, dataset=None, ceiling=None) -> dict:
    gen, _ = read_points_csv(generated)
    if (reference is None) == (dataset is None):
        raise ConfigError("give exactly one of --reference or --dataset")
    if reference is not None:
        ref, _ = read_points_csv(reference)
    else:
        spec = dataset if isinstance(dataset, dict) else _read_json(dataset)
        ref = make_dataset(spec).points
    if gen.shape[1] != ref.shape[1]:
        raise DataError(f"dimension mismatch: generated {gen.shape[1]}, reference {ref.shape[1]}")
    report = mmd_eval.evaluate(gen, ref)
    report["kernel"] = "rbf"
    if ceiling is not None:
        report["ceiling"] = ceiling
        report["above_ceiling"] = bool(report["mmd"] > ceiling)
    return report


def cmd_eval(args) -> int:
    out = Path(args.out) if args.out else Path(str(args.generated) + ".eval.json")
    _refuse_file(out, args.force)
    report = evaluate_files(args.generated, args.reference, args.dataset, args.ceiling)
    out.write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps({k: report[k] for k in ("mmd", "mmd_se", "bandwidth") if k in report}))
    return EXIT_OK


def _read_json(arg):
    """Accept a path to a JSON file or an inline JSON object."""
    text = arg if str(arg).lstrip().startswith("{") else None
    if text is None:
        try:
            text = Path(arg).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read {arg}: {e}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{arg}: invalid JSON ({e})") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dumo-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True, help="run config (path or inline JSON)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="grid of runs over config axes x replicate seeds")
    s.add_argument("--spec", required=True, help="sweep spec (path or inline JSON)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="base seed")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("sample", help="generate points from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--out", required=True, help="output CSV; a JSON sidecar is written next to it")
    g.add_argument("--nfe", type=int, default=1, help="flow-map steps, or Euler steps with --mode euler")
    g.add_argument("--mode", choices=("flowmap", "euler"), default="flowmap")
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--schedule", help="comma-separated times from 1 to 0")
    g.add_argument("--renoise", choices=("fresh", "none"), default="fresh")
    g.add_argument("--weights", choices=("ema", "params"), default="ema")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="MMD of a generated CSV against reference data")
    e.add_argument("--generated", required=True)
    e.add_argument("--reference", help="reference CSV")
    e.add_argument("--dataset", help="dataset spec (path or inline JSON)")
    e.add_argument("--ceiling", type=float)
    e.add_argument("--out", help="report path (default: <generated>.eval.json)")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except LabError as e:
        log.error("%s", e)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
