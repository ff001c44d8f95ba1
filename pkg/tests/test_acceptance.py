"""Acceptance gate: nine criteria, each printing one PASS/FAIL line."""
import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from plcql import dataset as dsm
from plcql.cli import run
from plcql.dataset import coverage, make_tier
from plcql.envs import grid_spread_make, matrix_coop_make
from plcql.nn import Mlp, SeededRng, softmax
from plcql.oracle import K_MODES, bound_sweep, contraction_ratios, random_instance
from plcql.par_policy import clipped_surrogate, surrogate_logit_grad, uncertainty_weight
from plcql.trainer import TrainConfig, TrainerState, load_state, run_iteration, save_state

from conftest import finite_difference
from test_par_policy import _surrogate_fd, run_bandit

ROOT = Path(__file__).resolve().parents[1]
ABLATION_CONFIG = ROOT / "configs" / "ablation_grid_spread.yaml"


def test_c1_gradient_correctness(acceptance_report):
    t0 = time.perf_counter()
    worst, nets = 0.0, 24
    for seed in range(nets):
        r = SeededRng(1000 + seed)
        depth = int(r.integers(1, 4))
        sizes = [int(r.integers(1, 7))] + [int(r.integers(2, 9)) for _ in range(depth)] + [int(r.integers(1, 4))]
        net = Mlp(sizes, r.spawn(0))
        x = r.normal(size=(int(r.integers(1, 5)), sizes[0]))
        up = r.normal(size=(x.shape[0], sizes[-1]))
        g = net.backward(x, up).flat()
        fd = np.concatenate([f.ravel() for f in
                             finite_difference(lambda: float((up * net.forward(x)).sum()), net.params())])
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)
        worst = max(worst, float(rel.max()))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-4 and secs < 10
    assert acceptance_report("C1 gradient correctness", ok,
                             f"{nets} nets, max relative error {worst:.2e}, {secs:.1f}s")


def test_c2_operator_contraction(acceptance_report):
    t0 = time.perf_counter()
    checks, worst, failures = 0, -math.inf, 0
    for idx in range(20):
        inst = random_instance(2000 + idx)
        for _, lhs, rhs in contraction_ratios(inst, SeededRng(idx), pairs=10):
            checks += 1
            worst = max(worst, lhs - rhs)
            failures += lhs > rhs + 1e-9
    secs = time.perf_counter() - t0
    ok = failures == 0 and secs < 60
    assert acceptance_report("C2 operator contraction", ok,
                             f"{checks} checks (every k and the mixture), {failures} violations, "
                             f"max lhs-rhs {worst:.2e}, {secs:.1f}s")


def test_c3_value_error_bound(acceptance_report):
    t0 = time.perf_counter()
    rows = bound_sweep(50, seed=0)
    holds = sum(r["holds"] for r in rows)
    by = {}
    for r in rows:
        by.setdefault(r["instance"], {})[r["k_mode"]] = r["measured_gap"]
    monotone = np.mean([g["k1"] <= g["uniform"] + 1e-12 and g["uniform"] <= g["kn"] + 1e-12 for g in by.values()])
    secs = time.perf_counter() - t0
    ok = holds == len(rows) == 50 * len(K_MODES) and secs < 300
    assert acceptance_report("C3 value-error bound", ok,
                             f"{holds}/{len(rows)} hold, max gap/bound "
                             f"{max(r['measured_gap'] / r['bound_value'] for r in rows):.3f}; "
                             f"monotone shift in k (soft, reported only) {monotone:.0%}, {secs:.1f}s")


def test_c4_evaluation_counts(acceptance_report):
    t0 = time.perf_counter()
    observed = {}
    for n in (2, 4, 6):
        env = grid_spread_make(n, 3, 5, seed=0)
        ds = make_tier(env, "random", 300, seed=0)
        for variant in ("plcql", "spacql_enum"):
            state = TrainerState(TrainConfig(variant=variant, iterations=5, seed=0), env, ds)
            counts = {run_iteration(state).q_evals_per_transition for _ in range(5)}
            observed[(n, variant)] = counts
    ok = all(observed[(n, "plcql")] == {1.0} and observed[(n, "spacql_enum")] == {float(n)} for n in (2, 4, 6))
    secs = time.perf_counter() - t0
    ok = ok and secs < 120
    detail = ", ".join(f"n={n}: {sorted(observed[(n, 'plcql')])} vs {sorted(observed[(n, 'spacql_enum')])}"
                       for n in (2, 4, 6))
    assert acceptance_report("C4 evaluation cost", ok, f"{detail}, {secs:.1f}s")


def test_c5_uncertainty_weight_law(acceptance_report):
    t0 = time.perf_counter()
    u = np.linspace(0.0, 30.0, 3001)
    w = uncertainty_weight(u, 1.0)
    spot = abs(uncertainty_weight(1.0, 1.0) - (1.0 / (1.0 + math.e) + 0.5))
    ok = (np.all(w > 0.5) and np.all(w <= 1.0) and w[0] == 1.0 and np.all(np.diff(w) < 0)
          and spot <= 1e-12)
    secs = time.perf_counter() - t0
    ok = ok and secs < 1
    assert acceptance_report("C5 uncertainty weight", ok,
                             f"range (0.5, 1], w(0)=1, strictly decreasing on 3001 points, "
                             f"|w(1,1)-direct|={spot:.1e}, {secs:.3f}s")


def test_c6_ppo_mechanics(acceptance_report):
    t0 = time.perf_counter()
    forced = (clipped_surrogate(1.0, 0.7, 0.2) == 0.7 and clipped_surrogate(2.0, 1.0, 0.2) == 1.2
              and clipped_surrogate(0.5, -1.0, 0.2) == -0.8)
    logits = np.array([[2.0, 0.0, -1.0]])
    old = np.array([math.log(softmax(logits[0])[0] / 1.5)])
    fd = _surrogate_fd(logits, np.array([0]), old, np.array([1.0]), 0.2)
    _, grad = surrogate_logit_grad(logits, np.array([0]), old, np.array([1.0]), 0.2)
    zero_grad = np.abs(fd).max() <= 1e-9 and not np.any(grad)
    a, b = run_bandit(n=3, updates=500)
    secs = time.perf_counter() - t0
    ok = forced and zero_grad and a >= 0.8 and b >= 0.8 and secs < 60
    assert acceptance_report("C6 PPO mechanics", ok,
                             f"forced examples {forced}, clipped-region FD max {np.abs(fd).max():.1e}, "
                             f"bandit mass A {a:.3f} / B {b:.3f} after 500 updates, {secs:.1f}s")


@pytest.mark.slow
def test_c7_ablation_direction(acceptance_report, tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "data.csv"
    base = ["--config", str(ABLATION_CONFIG), "--log-level", "WARNING"]
    assert run(["gen-data", *base, "--data.path", str(data)]) == 0
    assert run(["ablate", *base, "--data.path", str(data), "--out_dir", str(tmp_path / "ablate")]) == 0
    with open(tmp_path / "ablate" / "ablation_table.csv") as fh:
        table = {r["variant"]: (float(r["mean"]), float(r["std"])) for r in csv.DictReader(fh)}
    env = grid_spread_make(3, 4, 10, seed=0)
    slack = 0.05 * env.return_range()
    plcql = table["plcql"][0]
    best_fixed = max(table["fixed_k=1"][0], table["fixed_k=3"][0])
    secs = time.perf_counter() - t0
    ok = plcql >= best_fixed - slack and table["no_uncertainty"][0] <= plcql + slack and secs < 1800
    summary = ", ".join(f"{k} {m:.2f}±{s:.2f}" for k, (m, s) in table.items())
    assert acceptance_report("C7 ablation direction", ok,
                             f"{summary}; slack {slack:.2f} (5% of return range {env.return_range():.0f}), "
                             f"{secs:.0f}s")


def test_c8_coverage_gap(acceptance_report):
    t0 = time.perf_counter()
    results = []
    for seed in range(5):
        cov = []
        for n in (2, 3, 4):
            env = matrix_coop_make(n, 3, np.zeros((3,) * n))
            cov.append(coverage(make_tier(env, "random", 20, seed)).joint_coverage)
        results.append(cov)
    strictly = all(c[0] > c[1] > c[2] for c in results)
    secs = time.perf_counter() - t0
    ok = strictly and secs < 60
    assert acceptance_report("C8 coverage gap", ok,
                             "joint coverage n=2,3,4 at 20 transitions per seed: "
                             + "; ".join("/".join(f"{v:.3f}" for v in c) for c in results) + f", {secs:.1f}s")


def test_c9_determinism_and_persistence(acceptance_report, tmp_path):
    t0 = time.perf_counter()
    grid = ["--env.kind", "grid_spread", "--env.n", "3", "--env.grid_side", "4", "--env.horizon", "6"]
    data = tmp_path / "data.csv"
    assert run(["gen-data", *grid, "--data.path", str(data), "--data.size", "400", "--log-level", "WARNING"]) == 0
    fast = ["--iterations", "20", "--eval_every", "10", "--eval_episodes", "5", "--log-level", "WARNING"]
    for name in ("a", "b"):
        assert run(["train", *grid, "--data.path", str(data), "--out_dir", str(tmp_path / name), *fast]) == 0
    metrics_same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    ds = dsm.load(data)
    dsm.save(ds, tmp_path / "copy.csv")
    data_same = (tmp_path / "copy.csv").read_bytes() == data.read_bytes() and dsm.load(tmp_path / "copy.csv") == ds

    env = grid_spread_make(3, 4, 6, seed=0)
    cfg = TrainConfig(iterations=3, seed=4)
    state = TrainerState(cfg, env, ds)
    for _ in range(3):
        run_iteration(state)
    save_state(state, tmp_path / "ck1")
    restored = load_state(TrainerState(TrainConfig(seed=11), env, ds), tmp_path / "ck1")
    save_state(restored, tmp_path / "ck2")
    ckpt_same = all((tmp_path / "ck1" / f.name).read_bytes() == f.read_bytes()
                    for f in sorted((tmp_path / "ck2").iterdir()))
    secs = time.perf_counter() - t0
    ok = metrics_same and data_same and ckpt_same and secs < 120
    assert acceptance_report("C9 determinism and persistence", ok,
                             f"metrics identical {metrics_same}, dataset round trip {data_same}, "
                             f"checkpoint round trip {ckpt_same}, {secs:.1f}s")
