"""Per-agent categorical policies with Polyak targets."""
from __future__ import annotations

import numpy as np

from .ensemble import QEnsemble
from .nn import Mlp, Optimizer, SeededRng, apply_gradients, net_from_dict, net_to_dict, polyak, softmax


class AgentPolicySet:
    """``n`` softmax policies over per-agent actions, one net each."""

    def __init__(self, feature_dim: int, action_counts, hidden=(64, 64),
                 rng: SeededRng | None = None, lr: float = 3e-4, opt_mode: str = "adam",
                 zero: bool = False):
        self.feature_dim = int(feature_dim)
        self.action_counts = tuple(int(c) for c in action_counts)
        self.nets = [Mlp([self.feature_dim, *hidden, c], rng.spawn(100 + i) if rng is not None else None,
                         zero=zero)
                     for i, c in enumerate(self.action_counts)]
        self.targets = [m.copy() for m in self.nets]
        self.optimizers = [Optimizer(lr, opt_mode) for _ in self.nets]

    @property
    def n(self) -> int:
        return len(self.nets)

    def _check(self, i: int) -> None:
        if not 0 <= i < self.n:
            raise IndexError(f"agent index {i} out of range for {self.n} agents")

    def probs(self, i: int, s, target: bool = False) -> np.ndarray:
        self._check(i)
        nets = self.targets if target else self.nets
        return softmax(nets[i].forward(s))

    def all_probs(self, s, target: bool = False) -> list[np.ndarray]:
        return [self.probs(i, s, target) for i in range(self.n)]

    def act(self, i: int, s, rng: SeededRng | None = None, greedy: bool = False) -> int:
        """Sample (or argmax, lowest index on ties) an action for agent ``i``."""
        p = self.probs(i, np.asarray(s, dtype=np.float64))
        if greedy:
            return int(np.argmax(p))
        if rng is None:
            raise ValueError("sampling requires an rng")
        return int(rng.categorical(p))

    def joint_act(self, s, rng: SeededRng | None = None, greedy: bool = False) -> tuple[int, ...]:
        return tuple(self.act(i, s, rng, greedy) for i in range(self.n))

    # behaviour-policy protocol used by dataset.collect
    def __call__(self, env, state, rng):
        return self.joint_act(state.features, rng)

    def describe(self) -> str:
        return "agent-policy-set"

    def objective(self, i: int, ens: QEnsemble, batch, member: int = 0):
        """Exact ``E_{a_i ~ pi_i} Q_member(s, a_i, a_-i)`` per sample, with probs, Q table and cache."""
        self._check(i)
        B = len(batch)
        c = self.action_counts[i]
        acts = np.repeat(batch.a, c, axis=0)
        acts[:, i] = np.tile(np.arange(c), B)
        q = ens.q_member(member, np.repeat(batch.s, c, axis=0), acts).reshape(B, c)
        logits, cache = self.nets[i].forward_cached(batch.s)
        p = softmax(logits)
        return (p * q).sum(axis=1), p, q, cache

    def improve(self, i: int, ens: QEnsemble, batch, member: int = 0) -> float:
        """One ascent step on the exact expected critic value; returns the pre-step mean."""
        if len(batch) == 0:
            raise ValueError("improve on an empty batch")
        per_sample, p, q, cache = self.objective(i, ens, batch, member)
        B = len(batch)
        # d/dz sum_a softmax(z)_a q_a = p * (q - p.q)
        dlogits = p * (q - per_sample[:, None]) / B
        grads = self.nets[i].backward(batch.s, -dlogits, cache)
        apply_gradients(self.nets[i], self.optimizers[i], grads)
        return float(per_sample.mean())

    def polyak_policies(self, tau: float) -> None:
        for t, o in zip(self.targets, self.nets):
            polyak(t, o, tau)

    def exact_tables(self, state_features: np.ndarray, target: bool = False) -> list[np.ndarray]:
        """Per-agent ``(S, |A_i|)`` probability tables for enumerated states."""
        return self.all_probs(np.asarray(state_features, dtype=np.float64), target)

    def to_dicts(self, i: int) -> list[dict]:
        return [net_to_dict(self.nets[i], "online", self.optimizers[i]),
                net_to_dict(self.targets[i], "target")]

    def load_dicts(self, i: int, nets: list[dict]) -> None:
        by_name = {d["name"]: d for d in nets}
        self.nets[i], opt = net_from_dict(by_name["online"])
        self.targets[i], _ = net_from_dict(by_name["target"])
        if opt is not None:
            self.optimizers[i] = opt
