"""Partial action replacement: subsets, replaced next actions, targets.

Also holds the exact tabular form of the replacement backup, which the
oracle uses to check contraction and the value-error bound.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from itertools import combinations

import numpy as np

from .agents import AgentPolicySet
from .dataset import Batch, Transition
from .ensemble import QEnsemble
from .envs import TabularDecMDP, check_tabular_size
from .nn import SeededRng
from .par_policy import ParPolicy


@dataclass(frozen=True)
class ParDecision:
    k: int
    subset: tuple[int, ...]
    replacements: tuple[int, ...]

    def __post_init__(self):
        if len(self.subset) != self.k or len(self.replacements) != self.k:
            raise ValueError("subset and replacements must both have length k")
        if len(set(self.subset)) != self.k:
            raise ValueError("subset indices must be distinct")


@dataclass
class ParTarget:
    y: float
    decision: ParDecision
    u_q: float
    a_par: tuple[int, ...]
    log_prob: float | None = None


def sample_subset(n: int, k: int, rng: SeededRng) -> tuple[int, ...]:
    """Uniform size-``k`` subset of ``range(n)``, sorted."""
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    return tuple(sorted(int(i) for i in rng.permutation(n)[:k]))


def construct_par_action(a_next, decision: ParDecision) -> tuple[int, ...]:
    out = list(int(x) for x in a_next)
    for idx, rep in zip(decision.subset, decision.replacements):
        if not 0 <= idx < len(out):
            raise IndexError(f"agent index {idx} out of range for {len(out)} agents")
        out[idx] = int(rep)
    return tuple(out)


@dataclass
class BatchTargets:
    """Per-transition PAR results for the non-terminal part of a batch."""

    y: np.ndarray
    ks: np.ndarray
    log_probs: np.ndarray
    decisions: list[ParDecision]
    a_par: np.ndarray
    target_values: np.ndarray  # (J, B)
    online_values: np.ndarray  # (J, B)


def sample_decisions(policies: AgentPolicySet, s_next: np.ndarray, a_next: np.ndarray,
                     ks: np.ndarray, rng: SeededRng, use_target_policies: bool = False):
    """Draw subsets and replacement actions for each row; returns decisions and ``a_par``."""
    n = a_next.shape[1]
    probs = policies.all_probs(s_next, target=use_target_policies)
    decisions, a_par = [], a_next.copy()
    for b, k in enumerate(ks):
        subset = sample_subset(n, int(k), rng)
        reps = tuple(int(rng.categorical(probs[i][b])) for i in subset)
        d = ParDecision(int(k), subset, reps)
        decisions.append(d)
        a_par[b] = construct_par_action(a_next[b], d)
    return decisions, a_par


def par_targets_batch(ens: QEnsemble, policies: AgentPolicySet, par: ParPolicy | None,
                      batch: Batch, gamma: float, rng: SeededRng, fixed_k: int | None = None,
                      use_target_policies: bool = False) -> BatchTargets:
    """Targets ``r + gamma * min_j Qbar_j(s', a'^(k))`` for non-terminal rows.

    ``k`` comes from ``par`` unless ``fixed_k`` is given. Exactly one
    ensemble evaluation per row.
    """
    if np.any(batch.done) or np.any(batch.a_next < 0):
        raise ValueError("PAR targets need non-terminal transitions with a logged next action")
    B, n = batch.a_next.shape
    if fixed_k is not None:
        if not 1 <= fixed_k <= n:
            raise ValueError(f"fixed k={fixed_k} outside [1, {n}]")
        ks = np.full(B, fixed_k, dtype=np.int64)
        logp = np.zeros(B)
    else:
        ks, logp = par.sample_k_batch(batch.s_next, rng)
    decisions, a_par = sample_decisions(policies, batch.s_next, batch.a_next, ks, rng, use_target_policies)
    tv, ov = ens.evaluate_bootstrap(batch.s_next, a_par)
    y = batch.r + gamma * tv.min(axis=0)
    return BatchTargets(y, ks, logp, decisions, a_par, tv, ov)


def par_target(ens: QEnsemble, policies: AgentPolicySet, par: ParPolicy | None, tr: Transition,
               gamma: float, rng: SeededRng, fixed_k: int | None = None,
               use_target_policies: bool = False) -> ParTarget:
    """Single-transition form of :func:`par_targets_batch`."""
    if tr.done or tr.a_next is None:
        raise ValueError("terminal transition: use y = r")
    batch = Batch(np.atleast_2d(tr.s), np.array([tr.a]), np.array([tr.r]), np.atleast_2d(tr.s_next),
                  np.array([tr.a_next]), np.array([False]))
    out = par_targets_batch(ens, policies, par, batch, gamma, rng, fixed_k, use_target_policies)
    u = float(out.online_values[:, 0].std()) if ens.size > 1 else 0.0
    return ParTarget(float(out.y[0]), out.decisions[0], u, tuple(int(x) for x in out.a_par[0]),
                     float(out.log_probs[0]))


# ------------------------------------------------------------ exact operators

def _tables(policy) -> list[np.ndarray]:
    return [np.asarray(t, dtype=np.float64) for t in getattr(policy, "tables", policy)]


def product_distribution(tables: list[np.ndarray]) -> np.ndarray:
    """Joint ``(S, prod |A_i|)`` distribution of independent per-agent tables."""
    S = tables[0].shape[0]
    return reduce(lambda acc, t: np.einsum("sa,sb->sab", acc, t).reshape(S, -1), tables)


def par_joint_distribution(pi, mu, k: int) -> np.ndarray:
    """Law of ``a'^(k)`` per state: uniform size-``k`` subset follows ``pi``, the rest ``mu``."""
    pi_t, mu_t = _tables(pi), _tables(mu)
    n = len(pi_t)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    subsets = list(combinations(range(n), k))
    total = sum(product_distribution([pi_t[i] if i in c else mu_t[i] for i in range(n)]) for c in subsets)
    return total / len(subsets)


def _backup(mdp: TabularDecMDP, Q: np.ndarray, next_dist: np.ndarray, gamma: float) -> np.ndarray:
    check_tabular_size(mdp.num_states, mdp.joint_size)
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != mdp.R.shape:
        raise ValueError(f"Q table shape {Q.shape} != {mdp.R.shape}")
    v_next = (next_dist * Q).sum(axis=1)
    return mdp.R + gamma * mdp.P @ v_next


def exact_operator_apply(mdp: TabularDecMDP, Q, policies, behaviour, k: int, gamma: float) -> np.ndarray:
    """Exact replacement backup for a fixed subset size ``k``."""
    return _backup(mdp, Q, par_joint_distribution(policies, behaviour, k), gamma)


def mixture_distribution(policies, behaviour, k_probs) -> np.ndarray:
    k_probs = np.asarray(k_probs, dtype=np.float64)
    n = len(_tables(policies))
    if k_probs.ndim == 1:
        k_probs = np.broadcast_to(k_probs, (_tables(policies)[0].shape[0], n))
    return sum(k_probs[:, k - 1, None] * par_joint_distribution(policies, behaviour, k)
               for k in range(1, n + 1))


def mixture_operator_apply(mdp: TabularDecMDP, Q, policies, behaviour, k_probs, gamma: float) -> np.ndarray:
    """Backup under ``k ~ k_probs[s']`` (shape ``(S, n)`` or ``(n,)``)."""
    return _backup(mdp, Q, mixture_distribution(policies, behaviour, k_probs), gamma)
