"""Command-line entry point: gen-data, train, eval, ablate, verify, bench."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import dataset as dsm
from .config import COMMANDS, SCHEMA, RunConfig, build, load_yaml
from .envs import Env, TabularEnv, all_equal_payoff, grid_spread_make, matrix_coop_make, random_decmdp
from .oracle import bound_sweep, contraction_ratios, random_instance
from .nn import SeededRng
from .trainer import ConfigError, TrainerState, evaluate, load_policies, run_iteration, train, write_summary

log = logging.getLogger("plcql")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class VerificationFailed(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

def make_env(cfg: RunConfig, n: int | None = None) -> Env:
    n = cfg["env.n"] if n is None else n
    kind = cfg["env.kind"]
    if kind == "grid_spread":
        side = cfg["env.grid_side"]
        if n > side * side:
            raise ConfigError(f"env.grid_side: {side}x{side} grid cannot hold {n} landmarks")
        return grid_spread_make(n, side, cfg["env.horizon"], cfg["env.seed"], cfg["env.collision_penalty"])
    if kind == "matrix":
        A = cfg["env.actions"]
        if cfg["env.payoff"] == "all_equal":
            payoff = all_equal_payoff(n, A)
        else:
            payoff = np.zeros((A,) * n)
            payoff[(A - 1,) * n] = 1.0
        return matrix_coop_make(n, A, payoff)
    mdp = random_decmdp(cfg["env.seed"], n, cfg["env.states"], cfg["env.actions"], cfg["env.reward_scale"])
    return TabularEnv(mdp, cfg["env.horizon"], cfg["train.gamma"], cfg["env.seed"])


def env_hash(env: Env) -> str:
    return hashlib.sha256(json.dumps(env.describe(), sort_keys=True).encode()).hexdigest()[:16]


def load_matching_dataset(cfg: RunConfig, env: Env) -> dsm.OfflineDataset:
    path = Path(cfg["data.path"])
    if not path.is_file():
        raise ConfigError(f"data.path: {path} does not exist")
    ds = dsm.load(path)
    if ds.metadata.get("env_hash") != env_hash(env):
        raise ConfigError("data.path: dataset was generated for a different environment configuration")
    return ds


def prepare_out_dir(cfg: RunConfig, overwrite: bool) -> Path:
    out = Path(cfg["out_dir"])
    if out.exists() and not out.is_dir():
        raise ConfigError(f"out_dir: {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ConfigError(f"out_dir: {out} is not empty (pass --overwrite to reuse it)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def versions() -> dict:
    return {"plcql": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pyyaml": yaml.__version__}


# ----------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, overwrite: bool) -> dict:
    path = Path(cfg["data.path"])
    if path.exists() and not overwrite:
        raise ConfigError(f"data.path: {path} exists (pass --overwrite to replace it)")
    env = make_env(cfg)
    ds = dsm.make_tier(env, cfg["data.tier"], cfg["data.size"], cfg["data.seed"])
    path.parent.mkdir(parents=True, exist_ok=True)
    dsm.save(ds, path)
    cov = dsm.coverage(ds)
    returns = dsm.episode_returns(ds)
    return {"dataset": str(path), "size": len(ds), "tier": cfg["data.tier"],
            "joint_coverage": cov.joint_coverage, "marginal_coverage": cov.marginal_coverage,
            "episodes": len(returns), "mean_episode_return": float(np.mean(returns)) if returns else None}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    env = make_env(cfg)
    ds = load_matching_dataset(cfg, env)
    tc = cfg.train_config()
    state, hist = train(tc, env, ds, out, progress_every=max(1, tc.iterations // 10))
    last = hist[-1] if hist else None
    return {"iterations": tc.iterations,
            "final_eval_return_mean": last.eval_return_mean if last else None,
            "final_eval_return_std": last.eval_return_std if last else None,
            "final_td_loss": last.td_loss if last else None,
            "checkpoint": str(out / "checkpoints" / "final")}


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    env = make_env(cfg)
    ckpt = Path(cfg["eval.checkpoint"])
    if not ckpt.is_dir():
        raise ConfigError(f"eval.checkpoint: {ckpt} is not a directory")
    pol = load_policies(ckpt, env.spec.feature_dim, env.spec.action_counts)
    mean, std = evaluate(pol, env, cfg["eval.episodes"], cfg["eval.seed"])
    write_csv(out / "eval.csv", ["episodes", "eval_return_mean", "eval_return_std"],
              [[cfg["eval.episodes"], mean, std]])
    return {"eval_return_mean": mean, "eval_return_std": std}


def ablation_variants(n: int) -> list[tuple[str, str, int | None]]:
    return [("plcql", "plcql", None), ("fixed_k=1", "fixed_k", 1), (f"fixed_k={n}", "fixed_k", n),
            ("no_uncertainty", "no_uncertainty", None)]


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    env = make_env(cfg)
    ds = load_matching_dataset(cfg, env)
    runs, table = [], []
    for label, variant, k in ablation_variants(env.spec.n):
        returns = []
        for seed in cfg["ablate.seeds"]:
            tc = cfg.train_config(variant=variant, fixed_k=k, seed=int(seed))
            run_dir = out / "runs" / f"{label.replace('=', '')}_seed{seed}"
            t0 = time.perf_counter()
            _, hist = train(tc, env, ds, run_dir, checkpoints=False)
            ret = hist[-1].eval_return_mean if hist else evaluate(TrainerState(tc, env, ds), env,
                                                                  tc.eval_episodes, tc.seed + 7919)[0]
            log.info("ablate %s seed %s -> %.3f (%.1fs)", label, seed, ret, time.perf_counter() - t0)
            returns.append(ret)
            runs.append([label, int(seed), ret])
        table.append([label, float(np.mean(returns)), float(np.std(returns))])
    write_csv(out / "ablation_table.csv", ["variant", "mean", "std"], table)
    write_csv(out / "ablation_runs.csv", ["variant", "seed", "eval_return_mean"], runs)
    lo, hi = env.reward_bounds()
    return {"table": {row[0]: {"mean": row[1], "std": row[2]} for row in table},
            "return_range": env.return_range(), "reward_bounds": [lo, hi]}


def cmd_verify(cfg: RunConfig, out: Path) -> dict:
    rows = bound_sweep(cfg["verify.instances"], cfg["verify.seed"])
    header = list(rows[0].keys())
    write_csv(out / "bound_report.csv", header, [[r[h] for h in header] for r in rows])
    by_inst: dict[int, dict[str, float]] = {}
    for r in rows:
        by_inst.setdefault(r["instance"], {})[r["k_mode"]] = r["measured_gap"]
    monotone = [g["k1"] <= g["uniform"] + 1e-12 and g["uniform"] <= g["kn"] + 1e-12 for g in by_inst.values()]

    crows = []
    base = cfg["verify.seed"] * 100_003 + 50_000
    for idx in range(cfg["verify.contraction_instances"]):
        inst = random_instance(base + idx)
        for pair, (label, lhs, rhs) in enumerate(contraction_ratios(inst, SeededRng(base + idx),
                                                                    cfg["verify.pairs"])):
            crows.append([idx, label, pair, lhs, rhs, lhs <= rhs + 1e-9])
    write_csv(out / "contraction_report.csv", ["instance", "operator", "check", "lhs", "rhs", "holds"], crows)
    result = {"bound_checks": len(rows), "bound_holds": sum(r["holds"] for r in rows),
              "contraction_checks": len(crows), "contraction_holds": sum(r[-1] for r in crows),
              "monotone_shift_fraction": float(np.mean(monotone))}
    if result["bound_holds"] != result["bound_checks"] or result["contraction_holds"] != result["contraction_checks"]:
        result["failed"] = True
    return result


def cmd_bench(cfg: RunConfig, out: Path) -> dict:
    rows = []
    side = cfg["env.grid_side"]
    for n in (int(x) for x in cfg["bench.agents"]):
        side_n = max(side, math.ceil(math.sqrt(n)))
        env = grid_spread_make(n, side_n, cfg["env.horizon"], cfg["env.seed"], cfg["env.collision_penalty"])
        ds = dsm.make_tier(env, "random", cfg["bench.transitions"], cfg["data.seed"])
        per_variant = {}
        for variant in ("plcql", "spacql_enum"):
            tc = cfg.train_config(variant=variant, fixed_k=None, iterations=cfg["bench.iterations"])
            state = TrainerState(tc, env, ds)
            counts = set()
            t0 = time.perf_counter()
            for _ in range(tc.iterations):
                m = run_iteration(state)
                if m.q_evals_per_transition:
                    counts.add(m.q_evals_per_transition)
            secs = (time.perf_counter() - t0) / max(1, tc.iterations)
            if len(counts) != 1:
                raise RuntimeError(f"inconsistent evaluation counts {sorted(counts)} for n={n} {variant}")
            per_variant[variant] = (counts.pop(), state.ens.bootstrap_evals, secs)
        base_count, _, base_secs = per_variant["plcql"]
        for variant, (count, total, secs) in per_variant.items():
            rows.append([n, variant, cfg["bench.iterations"], count, total, secs,
                         count / base_count, secs / base_secs])
    write_csv(out / "bench.csv", ["n", "variant", "iterations", "q_evals_per_transition",
                                  "bootstrap_evals_total", "seconds_per_iter", "eval_ratio_vs_plcql",
                                  "time_ratio_vs_plcql"], rows)
    return {"rows": [dict(zip(["n", "variant", "q_evals_per_transition", "eval_ratio_vs_plcql"],
                              [r[0], r[1], r[3], r[6]])) for r in rows]}


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plcql", description="Offline multi-agent CQL with a learned "
                                     "partial-action-replacement policy.")
    parser.add_argument("--version", action="version", version=f"plcql {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    top_level = {k for k in SCHEMA if "." not in k}
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file (nested or flat dotted keys)")
        p.add_argument("--overwrite", action="store_true", help="reuse a non-empty output location")
        p.add_argument("--log-level", default="INFO")
        for key, spec in SCHEMA.items():
            flags = [f"--{key}"]
            leaf = key.split(".", 1)[-1]
            if key.startswith("train.") and leaf not in top_level:
                flags.append(f"--{leaf}")
            default = "" if spec.default is None else f" (default {spec.default})"
            p.add_argument(*flags, dest=f"key:{key}", default=None, metavar="VALUE", help=spec.help + default)
    return parser


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "verify": cmd_verify,
            "bench": cmd_bench}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    started = time.perf_counter()
    try:
        file_values = load_yaml(args.config) if args.config else {}
        flag_values = {k[4:]: v for k, v in vars(args).items() if k.startswith("key:") and v is not None}
        cfg = build(args.command, file_values, flag_values)
        if args.command == "gen-data":
            result = cmd_gen_data(cfg, args.overwrite)
            summary_path = (Path(cfg["out_dir"]) / "run_summary.json" if cfg["out_dir"]
                            else Path(cfg["data.path"]).with_suffix(".run_summary.json"))
            summary_path.parent.mkdir(parents=True, exist_ok=True)
        else:
            out = prepare_out_dir(cfg, args.overwrite)
            result = HANDLERS[args.command](cfg, out)
            summary_path = out / "run_summary.json"
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_summary(summary_path, {
        "command": args.command, "config": cfg.echo(), "config_sources": cfg.sources, "seed": cfg["seed"],
        "versions": versions(), "finished_at": datetime.now(timezone.utc).isoformat(),
        "elapsed_seconds": time.perf_counter() - started, "result": result})
    if result.get("failed"):
        print("runtime error: verification checks failed; see the reports", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
