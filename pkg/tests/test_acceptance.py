"""Numbered acceptance criteria. Each test records a one-line verdict that
conftest prints in the terminal summary.

Criteria 1 and 2 train 21 Moons models for 10K steps each (float32); expect
the module to take the better part of an hour on a single core.
"""
import math
import time

import numpy as np
import pytest

from dumo_lab.cli import main, run_sweep
from dumo_lab.eval import MmdConfig, mmd, mmd_bruteforce
from dumo_lab.network import Mlp, MlpConfig, param_count, param_overhead
from dumo_lab.objectives import (
    BaselineConfig,
    Batch,
    GuidanceConfig,
    dumo_grad_check,
    dumo_loss_and_grad,
    single_branch_loss_and_grad,
    surrogate_loss,
)
from dumo_lab.sampling import SampleConfig, sample_euler, sample_fewstep, sample_onestep
from dumo_lab.training import (
    OptimizerState,
    TrainConfig,
    _streams,
    adamw_step,
    loss_and_grad,
    make_batch,
    train,
)
from dumo_lab.data import make_moons

MOONS_PROTOCOL = {
    "version": 1,
    "train": {"steps": 10000, "batch_size": 256, "lr": 2e-4, "eval_every": 2500, "dtype": "float32"},
    "dataset": {"name": "moons", "n": 10000, "noise_sd": 0.1, "seed": 0},
    "heldout": {"n": 6000, "seed": 1_000_000},
    "replicates": 3,
}
RHOS = [0.0, 0.8, 1.0]
BETAS = [0.5, 0.6, 0.7, 0.8]


def _detail(request, text):
    request.node.user_properties.append(("detail", text))


@pytest.fixture(scope="session")
def baseline_grid(tmp_path_factory):
    spec = {**MOONS_PROTOCOL, "train": {**MOONS_PROTOCOL["train"], "paradigm": "single-branch"},
            "axes": {"rho": RHOS}}
    t0 = time.perf_counter()
    rows = run_sweep(spec, tmp_path_factory.mktemp("rho_sweep"))
    return {r["rho"]: r for r in rows}, time.perf_counter() - t0


@pytest.fixture(scope="session")
def dumo_grid(tmp_path_factory):
    spec = {**MOONS_PROTOCOL, "train": {**MOONS_PROTOCOL["train"], "paradigm": "dumo"}, "axes": {"beta": BETAS}}
    t0 = time.perf_counter()
    rows = run_sweep(spec, tmp_path_factory.mktemp("beta_sweep"))
    return {r["beta"]: r for r in rows}, time.perf_counter() - t0


def _fmt(row):
    return f"{row['median_mmd']:.5f} (div {row['n_diverged']}/3)"


@pytest.mark.acceptance(1, "velocity-ratio trend on Moons")
def test_rho_trend(baseline_grid, request):
    grid, secs = baseline_grid
    m0, m8, m1 = (grid[r]["median_mmd"] for r in RHOS)
    rho0_diverged = grid[0.0]["n_diverged"] >= 2
    ok = m8 < m1 and (m8 < m0 or rho0_diverged)
    _detail(request, f"rho=0: {_fmt(grid[0.0])}, rho=0.8: {_fmt(grid[0.8])}, rho=1: {_fmt(grid[1.0])}; "
                     f"{secs / 60:.1f} min")
    assert ok


@pytest.mark.acceptance(2, "dual-head vs best single-branch, 1-NFE")
def test_dumo_vs_baseline(baseline_grid, dumo_grid, request):
    base, _ = baseline_grid
    grid, secs = dumo_grid
    best_sb = min(r["median_mmd"] for r in base.values())
    best_beta = min(grid, key=lambda b: grid[b]["median_mmd"])
    best = grid[best_beta]["median_mmd"]
    _detail(request, f"best dual-head {best:.5f} (beta={best_beta}) vs best single-branch {best_sb:.5f}; "
                     f"betas " + ", ".join(f"{b}: {grid[b]['median_mmd']:.5f}" for b in BETAS)
            + f"; {secs / 60:.1f} min")
    assert math.isfinite(best) and best <= 1.10 * best_sb


@pytest.mark.acceptance(3, "gradient oracle, 2-16-16-2 dual-head net")
def test_gradient_oracle(request):
    errs = []
    for classes, zeta in ((0, 0.0), (2, 0.5)):
        mlp = Mlp(MlpConfig(hidden_dim=16, depth=2, num_classes=classes))
        rng = np.random.default_rng(classes)
        p = mlp.init_params(rng) + 0.05 * rng.normal(size=mlp.size)
        c = rng.integers(0, classes + 1, 8) if classes else None
        batch = Batch(rng.normal(size=(8, 2)), rng.normal(size=(8, 2)), rng.uniform(0.01, 0.99, 8), c)
        errs.append(dumo_grad_check(mlp, p, p.copy(), batch, 0.7, GuidanceConfig(zeta), fd_step=1e-6))
    _detail(request, "max rel err " + ", ".join(f"{e:.2e}" for e in errs))
    assert max(errs) < 1e-5


@pytest.mark.acceptance(4, "surrogate small-lambda limit and align term")
def test_surrogate_limit(request):
    mlp = Mlp(MlpConfig(hidden_dim=32, depth=3))
    worst, min_align = 0.0, math.inf
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p = mlp.init_params(rng)
        batch = Batch(rng.normal(size=(64, 2)), rng.normal(size=(64, 2)), rng.uniform(0.01, 0.99, 64))
        total, fm, align = surrogate_loss(mlp, p, p.copy(), batch, 1e-4)
        worst = max(worst, abs(total - fm) / max(fm, 1e-12))
        min_align = min(min_align, align)
    const = np.zeros(mlp.size)
    mlp.views(const)["head_v.b"][...] = [0.4, -1.1]
    _, _, align0 = surrogate_loss(mlp, const, const.copy(), batch, 0.5)
    _detail(request, f"max rel gap {worst:.2e}, min align {min_align:.2e}, constant-net align {align0:.1e}")
    assert worst < 1e-2 and min_align >= 0 and abs(align0) <= 1e-12


class _Counting(Mlp):
    def __init__(self, *a, **k):
        super().__init__(*a, **k)
        self.counts = [0, 0]

    def forward(self, params, x, t, r=None, c=None, keep_cache=False):
        self.counts[0 if keep_cache else 1] += 1
        return super().forward(params, x, t, r=r, c=c, keep_cache=keep_cache)


@pytest.mark.acceptance(5, "forward-pass accounting with guidance")
def test_pass_accounting(request):
    rng = np.random.default_rng(0)
    b = 256
    x, z = rng.normal(size=(b, 2)), rng.normal(size=(b, 2))
    batch = Batch(x, z, rng.uniform(0.01, 0.99, b), rng.integers(0, 3, b), rng.uniform(size=b))
    g = GuidanceConfig(0.5)
    dual = _Counting(MlpConfig(num_classes=2))
    single = _Counting(MlpConfig(num_classes=2, num_heads=1, num_time_inputs=2))
    p, q = dual.init_params(rng), single.init_params(rng)
    lb_d, _ = dumo_loss_and_grad(dual, p, p.copy(), batch, 0.7, g)
    lb_s, _ = single_branch_loss_and_grad(single, q, q.copy(), batch, BaselineConfig(0.8), g)
    per_step = tuple(dual.counts), tuple(single.counts)
    ok = (lb_d.grad_tracking_passes, lb_d.grad_free_passes) == (1, 3) == per_step[0]
    ok &= (lb_s.grad_tracking_passes, lb_s.grad_free_passes) == (1, 4) == per_step[1]

    def clock(fn, reps=10):
        fn()
        t0 = time.perf_counter()
        for _ in range(reps):
            fn()
        return (time.perf_counter() - t0) / reps

    td = clock(lambda: dumo_loss_and_grad(dual, p, p.copy(), batch, 0.7, g))
    ts = clock(lambda: single_branch_loss_and_grad(single, q, q.copy(), batch, BaselineConfig(0.8), g))
    _detail(request, f"dual-head {per_step[0]}/step, single-branch {per_step[1]}/step; "
                     f"measured step time saving {100 * (1 - td / ts):.1f}% (informational)")
    assert ok


@pytest.mark.acceptance(6, "second-head parameter overhead")
def test_head_overhead(request):
    cfg = MlpConfig()
    # input + 32 sin/cos pairs -> 4 x 256 SiLU layers -> two 2-d heads
    total = (2 + 64) * 256 + 256 + 3 * (256 * 256 + 256) + 2 * (256 * 2 + 2)
    assert param_count(cfg) == total
    frac = param_overhead(cfg)
    _detail(request, f"{frac:.5f} = 514/{total}")
    assert frac == 514 / total and frac < 0.01


@pytest.mark.acceptance(7, "oracle flow-map samplers return data exactly")
def test_oracle_samplers(request):
    class Oracle:
        def __init__(self, x0):
            self.x0 = x0

        def flowmap(self, x, t, c=None):
            return (x - self.x0) / t

    worst = 0.0
    rng = np.random.default_rng(0)
    for trial in range(20):
        x0, z = rng.normal(size=(64, 2)), rng.normal(size=(64, 2))
        worst = max(worst, np.abs(sample_onestep(Oracle(x0), z) - x0).max())
        mids = np.sort(rng.uniform(0.001, 0.999, trial % 6))[::-1]
        sched = (1.0, *mids, 0.0)
        cfg = SampleConfig(nfe=len(sched) - 1, schedule=sched, renoise="none")
        worst = max(worst, np.abs(sample_fewstep(Oracle(x0), z, cfg=cfg) - x0).max())
    _detail(request, f"max abs error {worst:.1e} over 20 schedules")
    assert worst <= 1e-12


@pytest.mark.acceptance(8, "MMD matches brute-force oracle")
def test_mmd_correctness(request):
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(20):
        X, Y = rng.normal(size=(100, 2)), rng.normal(0.2 * i / 20, 1.0, size=(100, 2))
        bw = float(rng.uniform(0.3, 2.0))
        for est in ("biased", "unbiased"):
            worst = max(worst, abs(mmd(X, Y, MmdConfig(bw, est)) - mmd_bruteforce(X, Y, bw, est)))
    self_gap = abs(mmd(X, X.copy(), MmdConfig(estimator="biased")))
    _detail(request, f"max |fast - brute| {worst:.1e}, biased MMD(X,X) {self_gap:.1e}")
    assert worst < 1e-10 and self_gap <= 1e-12


@pytest.mark.acceptance(9, "train command is byte-deterministic across worker settings")
def test_train_determinism(tmp_path, monkeypatch, request):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"version": 1, "train": {"hidden_dim": 64, "steps": 300, "eval_every": 100},'
                   ' "dataset": {"n": 2000}}')
    blobs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("DUMO_LAB_THREADS", threads)
        out = tmp_path / f"run{threads}"
        assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "11"]) == 0
        blobs.append((out / "metrics.jsonl").read_bytes())
    _detail(request, f"{len(blobs[0])} bytes, identical={blobs[0] == blobs[1]}")
    assert blobs[0] == blobs[1]


@pytest.mark.acceptance(10, "degeneration identities")
def test_degenerations(request):
    ds = make_moons(2000, 0.1, 0)
    small = dict(hidden_dim=32, depth=3, steps=100, batch_size=64, eval_every=10**6)
    fm = train(TrainConfig(paradigm="flow-matching", num_time_inputs=2, **small), ds)
    sb = train(TrainConfig(paradigm="single-branch", rho=1.0, **small), ds)
    same_losses = [r.total for r in fm.log] == [r.total for r in sb.log]
    same_params = fm.params.tobytes() == sb.params.tobytes()

    cfg = TrainConfig(paradigm="dumo", beta=1.0, **small)
    rngs = _streams(cfg.seed)
    mlp = Mlp(cfg.mlp_config())
    params = mlp.init_params(rngs["init"])
    opt = OptimizerState.zeros_like(params)
    u_grad_max = 0.0
    for _ in range(cfg.steps):
        _, grad = loss_and_grad(cfg, mlp, params, params.copy(), make_batch(cfg, ds, rngs, mlp))
        w = mlp.views(grad)
        u_grad_max = max(u_grad_max, np.abs(w["head_u.W"]).max(), np.abs(w["head_u.b"]).max())
        adamw_step(params, grad, opt, cfg.lr)

    class Const:
        def velocity(self, x, t, c=None):
            return np.broadcast_to([0.5, -0.25], x.shape)

    z = np.random.default_rng(1).normal(size=(100, 2))
    euler_err = max(np.abs(sample_euler(Const(), z, steps=n) - (z - [0.5, -0.25])).max() for n in (1, 7, 64, 100))
    _detail(request, f"rho=1 vs flow matching bitwise: losses {same_losses}, params {same_params}; "
                     f"max u-head grad with beta=1: {u_grad_max}; Euler constant-field error {euler_err:.1e}")
    assert same_losses and same_params and u_grad_max == 0.0 and euler_err <= 1e-13
