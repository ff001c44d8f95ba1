"""Contextual-bandit policy over subset sizes and its clipped-surrogate update."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import QEnsemble
from .nn import Mlp, Optimizer, SeededRng, apply_gradients, log_softmax, net_from_dict, net_to_dict, softmax


def uncertainty_weight(u_q, temperature: float):
    """``sigmoid(-u_q * T) + 0.5``: 1.0 at zero uncertainty, decays toward 0.5."""
    u = np.asarray(u_q, dtype=np.float64)
    w = 1.0 / (1.0 + np.exp(u * temperature)) + 0.5
    return float(w) if w.ndim == 0 else w


@dataclass
class ParReward:
    w: float
    r_par: float
    u_q: float
    k: int | None = None


class ParPolicy:
    """Categorical policy over ``k in {1..n}`` given bootstrap-state features."""

    def __init__(self, feature_dim: int, n: int, hidden=(64, 64), temperature: float = 1.0,
                 rng: SeededRng | None = None, lr: float = 3e-4, opt_mode: str = "adam",
                 zero: bool = False):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.n = int(n)
        self.temperature = float(temperature)
        self.net = Mlp([feature_dim, *hidden, self.n], rng.spawn(200) if rng is not None else None, zero=zero)
        self.old_net = self.net.copy()
        self.optimizer = Optimizer(lr, opt_mode)

    def probs(self, s, old: bool = False) -> np.ndarray:
        return softmax((self.old_net if old else self.net).forward(s))

    def log_probs(self, s, old: bool = False) -> np.ndarray:
        return log_softmax((self.old_net if old else self.net).forward(s))

    def sample_k(self, s, rng: SeededRng) -> tuple[int, float]:
        logp = self.log_probs(np.asarray(s, dtype=np.float64))
        idx = int(rng.categorical(np.exp(logp)))
        return idx + 1, float(logp[idx])

    def sample_k_batch(self, s, rng: SeededRng) -> tuple[np.ndarray, np.ndarray]:
        logp = self.log_probs(s)
        idx = rng.categorical(np.exp(logp))
        return idx + 1, logp[np.arange(len(idx)), idx]

    def refresh_old(self) -> None:
        self.old_net = self.net.copy()

    def entropy(self, s) -> float:
        p = self.probs(s)
        return float(-(p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1).mean())

    def to_dicts(self) -> list[dict]:
        return [net_to_dict(self.net, "policy", self.optimizer), net_to_dict(self.old_net, "old_policy")]

    def load_dicts(self, nets: list[dict]) -> None:
        by_name = {d["name"]: d for d in nets}
        self.net, opt = net_from_dict(by_name["policy"])
        self.old_net, _ = net_from_dict(by_name["old_policy"])
        if opt is not None:
            self.optimizer = opt


class Baseline:
    """Scalar value baseline ``V(s')`` for the bandit advantage."""

    def __init__(self, feature_dim: int, hidden=(64, 64), rng: SeededRng | None = None,
                 lr: float = 1e-3, opt_mode: str = "adam", zero: bool = False):
        self.net = Mlp([feature_dim, *hidden, 1], rng.spawn(300) if rng is not None else None, zero=zero)
        self.optimizer = Optimizer(lr, opt_mode)

    def value(self, s) -> np.ndarray:
        out = self.net.forward(s)
        return out[..., 0]

    def to_dicts(self) -> list[dict]:
        return [net_to_dict(self.net, "baseline", self.optimizer)]

    def load_dicts(self, nets: list[dict]) -> None:
        self.net, opt = net_from_dict(nets[0])
        if opt is not None:
            self.optimizer = opt


def rewards_from_values(online_values: np.ndarray, temperature: float, weighted: bool = True):
    """``(w, u_q, r_par)`` per column of a ``(J, B)`` array of member values.

    Member 0 supplies the rewarded value. ``weighted=False`` forces ``w = 1``.
    """
    u = online_values.std(axis=0)
    w = uncertainty_weight(u, temperature) if weighted else np.ones_like(u)
    w = np.atleast_1d(w)
    return w, u, w * online_values[0]


def par_reward(ens: QEnsemble, s_next, a_par, temperature: float) -> ParReward:
    vals = ens.q_all(np.atleast_2d(s_next), np.atleast_2d(a_par))
    w, u, r = rewards_from_values(vals, temperature)
    return ParReward(float(w[0]), float(r[0]), float(u[0]))


def baseline_update(b: Baseline, s_next, r_par) -> float:
    """One step on the mean squared error to ``r_par``; returns the pre-step loss."""
    r = np.asarray(r_par, dtype=np.float64)
    if r.size == 0:
        raise ValueError("baseline_update on an empty batch")
    s = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
    out, cache = b.net.forward_cached(s)
    resid = out[:, 0] - r
    loss = float(np.mean(resid ** 2))
    grads = b.net.backward(s, (2.0 * resid / r.size)[:, None], cache)
    apply_gradients(b.net, b.optimizer, grads)
    return loss


def clipped_surrogate(ratio, advantage, clip_eps: float):
    """Per-sample ``min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage)


def surrogate_logit_grad(logits, k_idx, old_log_prob, advantage, clip_eps: float):
    """Per-sample surrogate values and their gradient w.r.t. the policy logits."""
    logp_all = log_softmax(logits)
    rows = np.arange(len(k_idx))
    ratio = np.exp(logp_all[rows, k_idx] - old_log_prob)
    surr = clipped_surrogate(ratio, advantage, clip_eps)
    # the unclipped branch is the active one (ties included) unless clipping binds
    active = ratio * advantage <= np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage
    onehot = np.zeros_like(logp_all)
    onehot[rows, k_idx] = 1.0
    dlogp = onehot - np.exp(logp_all)
    grad = (active * ratio * advantage)[:, None] * dlogp
    return surr, grad


def ppo_update(par: ParPolicy, baseline, s_next, ks, old_log_prob, r_par,
               clip_eps: float = 0.2, epochs: int = 4, normalize: bool = True) -> float:
    """Ascend the clipped surrogate for ``epochs`` full-batch steps.

    ``baseline`` is either a :class:`Baseline` or precomputed values frozen at
    sampling time. ``ks`` are 1-based subset sizes. Returns the surrogate
    after the final step; the old-policy snapshot is refreshed on exit.
    """
    s = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
    ks = np.asarray(ks, dtype=np.int64)
    if ks.size == 0:
        raise ValueError("ppo_update on an empty batch")
    values = baseline.value(s) if isinstance(baseline, Baseline) else np.asarray(baseline, dtype=np.float64)
    adv = np.asarray(r_par, dtype=np.float64) - values
    if not np.all(np.isfinite(adv)):
        raise FloatingPointError("non-finite advantage")
    if normalize and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    k_idx = ks - 1
    old = np.asarray(old_log_prob, dtype=np.float64)
    B = ks.size
    for _ in range(epochs):
        logits, cache = par.net.forward_cached(s)
        _, grad = surrogate_logit_grad(logits, k_idx, old, adv, clip_eps)
        apply_gradients(par.net, par.optimizer, par.net.backward(s, -grad / B, cache))
    surr, _ = surrogate_logit_grad(par.net.forward(s), k_idx, old, adv, clip_eps)
    par.refresh_old()
    return float(surr.mean())
