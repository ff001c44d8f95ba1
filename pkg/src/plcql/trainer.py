"""PLCQL training loop, ablation variants, evaluation and run artifacts."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .agents import AgentPolicySet
from .dataset import Batch, OfflineDataset
from .ensemble import ConservativeConfig, QEnsemble, td_loss
from .envs import Env
from .nn import Optimizer, SeededRng, apply_gradients, load_checkpoint, save_checkpoint
from .par import par_targets_batch, sample_decisions
from .par_policy import Baseline, ParPolicy, baseline_update, ppo_update, rewards_from_values, uncertainty_weight

log = logging.getLogger(__name__)

VARIANTS = ("plcql", "fixed_k", "spacql_enum", "no_uncertainty")

METRIC_COLUMNS = ("iter", "td_loss", "cql_penalty", "mean_q", "mean_k", "par_entropy", "mean_w",
                  "mean_u_q", "par_surrogate", "v_loss", "q_evals_per_transition",
                  "eval_return_mean", "eval_return_std")


class ConfigError(ValueError):
    """Invalid training configuration; the message names the offending key."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 1.0
    lam: list[float] | None = None
    temperature: float = 1.0
    clip_eps: float = 0.2
    ppo_epochs: int = 4
    ensemble_size: int = 10
    batch_size: int = 64
    iterations: int = 1000
    lr_q: float = 3e-4
    lr_pi: float = 3e-4
    lr_par: float = 3e-4
    lr_v: float = 1e-3
    seed: int = 0
    variant: str = "plcql"
    fixed_k: int | None = None
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    par_hidden: list[int] = field(default_factory=lambda: [64, 64])
    normalize_advantage: bool = True
    use_target_policies: bool = False
    eval_episodes: int = 100
    eval_every: int = 0
    checkpoint_every: int = 0

    def validate(self, n: int | None = None) -> "TrainConfig":
        def need(ok: bool, key: str, msg: str):
            if not ok:
                raise ConfigError(f"{key}: {msg}")
        need(0.0 < self.gamma < 1.0, "gamma", "must lie in (0, 1)")
        need(0.0 < self.tau <= 1.0, "tau", "must lie in (0, 1]")
        need(self.alpha >= 0.0, "alpha", "must be >= 0")
        need(self.temperature > 0.0, "temperature", "must be > 0")
        need(self.clip_eps > 0.0, "clip_eps", "must be > 0")
        need(self.ppo_epochs >= 1, "ppo_epochs", "must be >= 1")
        need(self.ensemble_size >= 2, "ensemble_size", "must be >= 2")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(self.iterations >= 0, "iterations", "must be >= 0")
        for key in ("lr_q", "lr_pi", "lr_par", "lr_v"):
            need(getattr(self, key) > 0.0, key, "must be > 0")
        need(self.variant in VARIANTS, "variant", f"must be one of {VARIANTS}")
        need(self.eval_episodes >= 1, "eval_episodes", "must be >= 1")
        need(self.eval_every >= 0 and self.checkpoint_every >= 0, "eval_every",
             "intervals must be >= 0")
        if self.variant == "fixed_k":
            need(self.fixed_k is not None and self.fixed_k >= 1, "fixed_k", "required (>= 1) for variant fixed_k")
            if n is not None:
                need(self.fixed_k <= n, "fixed_k", f"must be <= n={n}")
        if self.lam is not None:
            need(all(v >= 0 for v in self.lam), "lam", "weights must be >= 0")
            if n is not None:
                need(len(self.lam) == n, "lam", f"must have length n={n}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class IterationMetrics:
    iter: int
    td_loss: float
    cql_penalty: float
    mean_q: float
    mean_k: float
    par_entropy: float
    mean_w: float
    mean_u_q: float
    par_surrogate: float
    v_loss: float
    q_evals_per_transition: float
    eval_return_mean: float | None = None
    eval_return_std: float | None = None

    def row(self) -> list[str]:
        out = []
        for name in METRIC_COLUMNS:
            v = getattr(self, name)
            out.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
        return out


class TrainerState:
    """All learned components plus the RNG stream for one run."""

    def __init__(self, cfg: TrainConfig, env: Env, dataset: OfflineDataset):
        spec = env.spec
        if dataset.n != spec.n or tuple(dataset.action_counts) != tuple(spec.action_counts):
            raise ValueError("dataset agents/actions do not match the environment")
        cfg.validate(spec.n)
        self.cfg = cfg
        self.env = env
        self.dataset = dataset
        self.n = spec.n
        d = spec.feature_dim
        init = SeededRng(cfg.seed)
        self.ens = QEnsemble(d, spec.action_counts, cfg.ensemble_size, cfg.hidden, init.spawn(1))
        self.q_opts = [Optimizer(cfg.lr_q) for _ in range(cfg.ensemble_size)]
        self.policies = AgentPolicySet(d, spec.action_counts, cfg.hidden, init.spawn(2), lr=cfg.lr_pi)
        self.par = ParPolicy(d, self.n, cfg.par_hidden, cfg.temperature, init.spawn(3), lr=cfg.lr_par)
        self.baseline = Baseline(d, cfg.par_hidden, init.spawn(4), lr=cfg.lr_v)
        self.conservative = ConservativeConfig(cfg.alpha, tuple(cfg.lam) if cfg.lam is not None else None)
        self.rng = init.spawn(5)
        self.iteration = 0


@dataclass
class VariantTargets:
    """Targets for the non-terminal rows of a batch and the bandit data they produce."""

    y: np.ndarray
    ks: np.ndarray
    log_probs: np.ndarray
    w: np.ndarray
    u_q: np.ndarray
    r_par: np.ndarray
    evals: int


def variant_target(state: TrainerState, batch: Batch) -> VariantTargets:
    """Dispatch target construction on ``cfg.variant`` for non-terminal rows."""
    cfg = state.cfg
    ens, n = state.ens, state.n
    before = ens.bootstrap_evals
    if cfg.variant == "spacql_enum":
        B = len(batch)
        ys, us = np.zeros((n, B)), np.zeros((n, B))
        q1 = np.zeros((n, B))
        for k in range(1, n + 1):
            ks = np.full(B, k, dtype=np.int64)
            _, a_par = sample_decisions(state.policies, batch.s_next, batch.a_next, ks, state.rng,
                                        cfg.use_target_policies)
            tv, ov = ens.evaluate_bootstrap(batch.s_next, a_par)
            ys[k - 1] = batch.r + cfg.gamma * tv.min(axis=0)
            us[k - 1] = ov.std(axis=0)
            q1[k - 1] = ov[0]
        weights = 1.0 / (1.0 + np.exp(us * cfg.temperature))
        weights = weights / weights.sum(axis=0, keepdims=True)
        y = (weights * ys).sum(axis=0)
        w = uncertainty_weight(us, cfg.temperature)
        return VariantTargets(y, np.full(B, np.nan), np.zeros(B), (weights * w).sum(axis=0),
                              (weights * us).sum(axis=0), (weights * w * q1).sum(axis=0),
                              ens.bootstrap_evals - before)
    fixed = cfg.fixed_k if cfg.variant == "fixed_k" else None
    out = par_targets_batch(ens, state.policies, state.par, batch, cfg.gamma, state.rng,
                            fixed_k=fixed, use_target_policies=cfg.use_target_policies)
    w, u, r_par = rewards_from_values(out.online_values, cfg.temperature,
                                      weighted=cfg.variant != "no_uncertainty")
    return VariantTargets(out.y, out.ks.astype(np.float64), out.log_probs, w, u, r_par,
                          ens.bootstrap_evals - before)


def _mean(x) -> float:
    return float(np.mean(x)) if len(x) else float("nan")


def run_iteration(state: TrainerState) -> IterationMetrics:
    """One outer iteration: targets, critic step, baseline, agents, bandit update."""
    cfg = state.cfg
    ens = state.ens
    batch = state.dataset.sample_batch(state.rng, cfg.batch_size)
    boot = ~batch.done & np.all(batch.a_next >= 0, axis=1)
    idx = np.flatnonzero(boot)
    y = batch.r.copy()
    vt = None
    if idx.size:
        sub = batch.subset(idx)
        vt = variant_target(state, sub)
        y[idx] = vt.y

    # critic step on TD + conservative penalty, then target averaging
    probs = state.policies.all_probs(batch.s)
    res = td_loss(ens, batch, y, probs, state.conservative)
    if not math.isfinite(res.loss):
        raise TrainingDiverged(f"non-finite critic loss at iteration {state.iteration}")
    for net, opt, g in zip(ens.online, state.q_opts, res.grads):
        apply_gradients(net, opt, g)
    ens.polyak_targets(cfg.tau)

    learns_par = cfg.variant in ("plcql", "no_uncertainty")
    v_loss = float("nan")
    surrogate = float("nan")
    entropy = float("nan")
    if vt is not None and learns_par:
        s_next = batch.s_next[idx]
        v_frozen = state.baseline.value(s_next)
        v_loss = baseline_update(state.baseline, s_next, vt.r_par)
        entropy = state.par.entropy(s_next)

    for i in range(state.n):
        state.policies.improve(i, ens, batch)
    state.policies.polyak_policies(cfg.tau)

    if vt is not None and learns_par:
        surrogate = ppo_update(state.par, v_frozen, s_next, vt.ks.astype(np.int64), vt.log_probs,
                               vt.r_par, cfg.clip_eps, cfg.ppo_epochs, cfg.normalize_advantage)

    mean_q = float(ens.q_all(batch.s, batch.a).mean())
    state.iteration += 1
    return IterationMetrics(
        iter=state.iteration, td_loss=res.td, cql_penalty=res.penalty, mean_q=mean_q,
        mean_k=_mean(vt.ks) if vt is not None else float("nan"),
        par_entropy=entropy,
        mean_w=_mean(vt.w) if vt is not None else float("nan"),
        mean_u_q=_mean(vt.u_q) if vt is not None else float("nan"),
        par_surrogate=surrogate, v_loss=v_loss,
        q_evals_per_transition=(vt.evals / idx.size) if vt is not None else 0.0,
    )


def evaluate(state_or_policies, env: Env, episodes: int = 100, seed: int = 12345) -> tuple[float, float]:
    """Greedy rollouts on a fresh clone; returns mean and population std of returns."""
    policies = getattr(state_or_policies, "policies", state_or_policies)
    env = env.clone()
    rng = SeededRng(seed)
    returns = []
    for _ in range(episodes):
        s = env.reset(rng)
        total, done = 0.0, False
        while not done:
            a = policies.joint_act(s.features, greedy=True)
            s, r, done = env.step(s, a, rng)
            total += r
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


def save_state(state: TrainerState, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg = state.cfg
    save_checkpoint(d / "q_ensemble.json", "q_ensemble", state.ens.to_dicts(state.q_opts), cfg.seed,
                    state.iteration, {"J": state.ens.size, "action_counts": list(state.ens.action_counts),
                                      "feature_dim": state.ens.feature_dim,
                                      "trainer_rng": state.rng.get_state()})
    save_checkpoint(d / "par_policy.json", "par_policy", state.par.to_dicts(), cfg.seed, state.iteration,
                    {"n": state.n, "temperature": state.par.temperature})
    save_checkpoint(d / "par_baseline.json", "par_baseline", state.baseline.to_dicts(), cfg.seed,
                    state.iteration)
    for i in range(state.n):
        save_checkpoint(d / f"agent_policy_{i}.json", f"agent_policy_{i}", state.policies.to_dicts(i),
                        cfg.seed, state.iteration, {"agent": i,
                                                    "actions": state.policies.action_counts[i]})


def load_state(state: TrainerState, directory) -> TrainerState:
    """Restore every network and optimizer written by :func:`save_state` into ``state``."""
    d = Path(directory)
    doc = load_checkpoint(d / "q_ensemble.json", "q_ensemble")
    if doc["metadata"].get("J") != state.ens.size:
        raise ValueError(f"checkpoint ensemble size {doc['metadata'].get('J')} != {state.ens.size}")
    opts = state.ens.load_dicts(doc["nets"])
    state.q_opts = [o if o is not None else q for o, q in zip(opts, state.q_opts)]
    state.iteration = int(doc["step"])
    state.cfg = replace(state.cfg, seed=int(doc["rng_seed"]))
    if "trainer_rng" in doc["metadata"]:
        state.rng.set_state(doc["metadata"]["trainer_rng"])
    state.par.load_dicts(load_checkpoint(d / "par_policy.json", "par_policy")["nets"])
    state.baseline.load_dicts(load_checkpoint(d / "par_baseline.json", "par_baseline")["nets"])
    for i in range(state.n):
        state.policies.load_dicts(i, load_checkpoint(d / f"agent_policy_{i}.json", f"agent_policy_{i}")["nets"])
    return state


def load_policies(directory, feature_dim: int, action_counts) -> AgentPolicySet:
    pol = AgentPolicySet(feature_dim, action_counts, zero=True)
    for i in range(len(action_counts)):
        doc = load_checkpoint(Path(directory) / f"agent_policy_{i}.json", f"agent_policy_{i}")
        pol.load_dicts(i, doc["nets"])
    return pol


def train(cfg: TrainConfig, env: Env, dataset: OfflineDataset, out_dir=None,
          progress_every: int = 0, checkpoints: bool = True) -> tuple[TrainerState, list[IterationMetrics]]:
    """Run ``cfg.iterations`` iterations; writes metrics (and checkpoints) when ``out_dir`` is set."""
    state = TrainerState(cfg, env, dataset)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
    history = []
    try:
        for it in range(1, cfg.iterations + 1):
            m = run_iteration(state)
            last = it == cfg.iterations
            if (cfg.eval_every and it % cfg.eval_every == 0) or last:
                m.eval_return_mean, m.eval_return_std = evaluate(state, env, cfg.eval_episodes, cfg.seed + 7919)
            history.append(m)
            if writer is not None:
                writer.writerow(m.row())
            if out is not None and checkpoints and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_state(state, out / "checkpoints" / f"iter_{it:06d}")
            if progress_every and it % progress_every == 0:
                log.info("iter %d td=%.4f k=%.2f w=%.3f", it, m.td_loss, m.mean_k, m.mean_w)
    finally:
        if fh is not None:
            fh.close()
    if out is not None and checkpoints:
        save_state(state, out / "checkpoints" / "final")
    return state, history


def write_summary(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
