import csv
import json

import numpy as np
import pytest

from dumo_lab.cli import main, resolve_run, run_sweep, sweep_cells
from dumo_lab.data import make_moons, read_points_csv, write_points_csv
from dumo_lab.errors import ConfigError

TINY_TRAIN = {
    "hidden_dim": 16, "depth": 2, "time_embed_dim": 8, "freq_max": 10.0,
    "batch_size": 32, "steps": 12, "eval_every": 6,
}
TINY = {"version": 1, "train": TINY_TRAIN, "dataset": {"name": "moons", "n": 400}, "heldout": {"n": 600}}


def _write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = _write(root, "cfg.json", TINY)
    assert main(["train", "--config", cfg, "--out", str(root / "dumo")]) == 0
    return root


def test_train_writes_run_directory(trained):
    run = trained / "dumo"
    assert {"metrics.jsonl", "checkpoint.bin", "resolved-config.json", "summary.json"} <= {
        p.name for p in run.iterdir()
    }
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == list(range(1, 13))
    resolved = json.loads((run / "resolved-config.json").read_text())
    assert resolved["train"]["lr"] == 2e-4 and resolved["train"]["ema_decay"] is not None
    assert resolved["dataset"]["noise_sd"] == 0.1 and resolved["heldout"]["seed"] == 1_000_000


def test_resolved_config_reproduces_run(trained, tmp_path):
    resolved = str(trained / "dumo" / "resolved-config.json")
    assert main(["train", "--config", resolved, "--out", str(tmp_path / "again")]) == 0
    a = (trained / "dumo" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "again" / "metrics.jsonl").read_bytes() == a


def test_train_refuses_overwrite(trained):
    cfg = str(trained / "cfg.json")
    assert main(["train", "--config", cfg, "--out", str(trained / "dumo")]) == 2


def test_train_validation_errors(tmp_path, caplog):
    bad = {**TINY, "train": {**TINY_TRAIN, "zeta": 0.3}}
    assert main(["train", "--config", _write(tmp_path, "z.json", bad), "--out", str(tmp_path / "z")]) == 2
    assert "conditional" in caplog.text
    typo = {**TINY, "train": {**TINY_TRAIN, "lrate": 0.1}}
    assert main(["train", "--config", _write(tmp_path, "t.json", typo), "--out", str(tmp_path / "t")]) == 2
    assert "lrate" in caplog.text
    with pytest.raises(ConfigError, match="version"):
        resolve_run({"train": {}})
    with pytest.raises(ConfigError, match="extra"):
        resolve_run({"version": 1, "extra": 1})


def test_divergence_exit_code(tmp_path):
    doc = {**TINY, "train": {**TINY_TRAIN, "lr": 1e200}}
    assert main(["train", "--config", _write(tmp_path, "d.json", doc), "--out", str(tmp_path / "d")]) == 3
    summary = json.loads((tmp_path / "d" / "summary.json").read_text())
    assert summary["diverged"] and summary["divergence_step"] is not None


def test_sample_sidecar_and_reproducibility(trained, tmp_path):
    ck = str(trained / "dumo" / "checkpoint.bin")
    out = tmp_path / "g.csv"
    assert main(["sample", "--checkpoint", ck, "--count", "50", "--seed", "4", "--out", str(out)]) == 0
    side = json.loads((tmp_path / "g.csv.json").read_text())
    assert side["passes"] == 50 and side["nfe"] == 1 and side["mode"] == "flowmap"
    first = out.read_bytes()
    assert main(["sample", "--checkpoint", ck, "--count", "50", "--seed", "4", "--out", str(out)]) == 2
    assert main(["sample", "--checkpoint", ck, "--count", "50", "--seed", "4", "--out", str(out), "--force"]) == 0
    assert out.read_bytes() == first

    e = tmp_path / "e.csv"
    assert main(["sample", "--checkpoint", ck, "--count", "20", "--mode", "euler", "--nfe", "100", "--out", str(e)]) == 0
    assert json.loads((tmp_path / "e.csv.json").read_text())["passes"] == 2000


def test_sample_mode_head_mismatch(tmp_path):
    doc = {**TINY, "train": {**TINY_TRAIN, "paradigm": "flow-matching", "steps": 2}}
    run = tmp_path / "fm"
    assert main(["train", "--config", _write(tmp_path, "fm.json", doc), "--out", str(run)]) == 0
    ck = str(run / "checkpoint.bin")
    assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "x.csv")]) == 2


def test_eval_report(tmp_path):
    spec = {"name": "moons", "n": 6000, "seed": 7}
    ref = make_moons(6000, 0.1, 7).points
    shuffled = np.random.default_rng(0).permutation(ref)
    g = tmp_path / "same.csv"
    write_points_csv(g, shuffled)
    assert main(["eval", "--generated", str(g), "--dataset", json.dumps(spec)]) == 0
    rep = json.loads((tmp_path / "same.csv.eval.json").read_text())
    assert abs(rep["mmd"]) < 3 * rep["mmd_se"] + 1e-12
    assert len(rep["bandwidth"]) == 3 and rep["kernel"] == "rbf"

    z = tmp_path / "zeros.csv"
    write_points_csv(z, np.zeros((2000, 2)))
    assert main(["eval", "--generated", str(z), "--dataset", json.dumps(spec), "--ceiling", "0.25"]) == 0
    rep = json.loads((tmp_path / "zeros.csv.eval.json").read_text())
    assert rep["above_ceiling"] and rep["mmd"] > 0.25


def test_eval_dimension_mismatch(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_points_csv(a, np.zeros((10, 2)))
    write_points_csv(b, np.zeros((10, 3)))
    assert main(["eval", "--generated", str(a), "--reference", str(b)]) == 2


def test_sweep_cells():
    assert sweep_cells({}) == [{}]
    assert len(sweep_cells({"rho": [0.0, 0.25, 0.5, 0.75, 0.8, 1.0]})) == 6
    assert len(sweep_cells({"beta": [i / 10 for i in range(11)]})) == 11
    assert sweep_cells({"a": [1, 2], "b": [3]}) == [{"a": 1, "b": 3}, {"a": 2, "b": 3}]


def test_sweep_grid(tmp_path):
    spec = {**TINY, "train": {**TINY_TRAIN, "paradigm": "single-branch", "steps": 4, "eval_every": 4},
            "axes": {"rho": [0.0, 1.0]}, "replicates": 2}
    assert main(["sweep", "--spec", _write(tmp_path, "s.json", spec), "--out", str(tmp_path / "sw")]) == 0
    with open(tmp_path / "sw" / "grid.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["rho"] for r in rows] == ["0.0", "1.0"]
    assert {"median_mmd", "mmd_0", "mmd_1", "diverged_0", "diverged_1", "seed_0", "seed_1"} <= set(rows[0])
    assert rows[0]["seed_1"] == "1"
    assert len(list((tmp_path / "sw" / "runs").iterdir())) == 4


def test_sweep_single_cell_and_bad_axis(tmp_path):
    spec = {**TINY, "train": {**TINY_TRAIN, "steps": 2, "eval_every": 2}, "replicates": 1}
    rows = run_sweep(spec, tmp_path)
    assert len(rows) == 1
    with pytest.raises(ConfigError, match="learning_rate"):
        run_sweep({**spec, "axes": {"learning_rate": [1e-3]}}, tmp_path / "x")


def test_sweep_worker_pool_matches_sequential(tmp_path, monkeypatch):
    spec = {**TINY, "train": {**TINY_TRAIN, "steps": 3, "eval_every": 3}, "axes": {"beta": [0.5, 0.9]},
            "replicates": 1}
    seq = run_sweep(spec, tmp_path / "seq", workers=1)
    monkeypatch.setenv("DUMO_LAB_THREADS", "2")
    par = run_sweep(spec, tmp_path / "par")
    assert seq == par
    for run in (tmp_path / "seq" / "runs").iterdir():
        twin = tmp_path / "par" / "runs" / run.name
        assert (run / "metrics.jsonl").read_bytes() == (twin / "metrics.jsonl").read_bytes()


def test_points_csv_round_trip_with_classes(tmp_path):
    p = tmp_path / "p.csv"
    pts = np.random.default_rng(0).normal(size=(5, 2))
    write_points_csv(p, pts, np.array([0, 1, 1, 0, 2]))
    back, labels = read_points_csv(p)
    assert back.tobytes() == pts.tobytes() and labels.tolist() == [0, 1, 1, 0, 2]
