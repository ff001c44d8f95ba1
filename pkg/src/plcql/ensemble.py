"""Q-ensemble with Polyak targets, uncertainty and the conservative penalty."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import GradientBundle, Mlp, SeededRng, net_from_dict, net_to_dict, polyak, ShapeError


@dataclass
class ConservativeConfig:
    alpha: float = 1.0
    lam: tuple[float, ...] | None = None

    def weights(self, n: int) -> np.ndarray:
        if self.lam is None:
            return np.full(n, 1.0 / n)
        lam = np.asarray(self.lam, dtype=np.float64)
        if lam.shape != (n,):
            raise ValueError(f"lambda must have length {n}")
        if np.any(lam < 0):
            raise ValueError("lambda weights must be nonnegative")
        return lam


class QEnsemble:
    """``J`` online critics plus target copies.

    Each critic reads state features concatenated with the per-agent one-hot
    encoding of the joint action and returns a scalar.
    """

    def __init__(self, feature_dim: int, action_counts, size: int = 10,
                 hidden=(64, 64), rng: SeededRng | None = None, zero: bool = False):
        if size < 1:
            raise ValueError("ensemble size must be >= 1")
        self.feature_dim = int(feature_dim)
        self.action_counts = tuple(int(c) for c in action_counts)
        self.offsets = np.concatenate([[0], np.cumsum(self.action_counts)[:-1]]).astype(np.int64)
        sizes = [self.feature_dim + sum(self.action_counts), *hidden, 1]
        self.online = [Mlp(sizes, rng.spawn(j) if rng is not None else None, zero=zero)
                       for j in range(size)]
        self.target = [m.copy() for m in self.online]
        # bootstrap joint actions evaluated through evaluate_bootstrap
        self.bootstrap_evals = 0

    @property
    def size(self) -> int:
        return len(self.online)

    @property
    def n(self) -> int:
        return len(self.action_counts)

    def encode(self, s, a) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.int64))
        if s.shape[1] != self.feature_dim or a.shape[1] != self.n or s.shape[0] != a.shape[0]:
            raise ShapeError(f"state/action shapes {s.shape}, {a.shape} do not match the ensemble")
        if np.any(a < 0) or np.any(a >= np.array(self.action_counts)):
            raise ShapeError("joint action component out of range")
        onehot = np.zeros((a.shape[0], sum(self.action_counts)))
        rows = np.arange(a.shape[0])[:, None]
        onehot[rows, a + self.offsets] = 1.0
        return np.hstack([s, onehot])

    def _values(self, nets, x) -> np.ndarray:
        return np.stack([m.forward(x)[:, 0] for m in nets])

    def q_all(self, s, a, target: bool = False) -> np.ndarray:
        """Member values; ``(J,)`` for one input, ``(J, B)`` for a batch."""
        single = np.asarray(s).ndim == 1
        vals = self._values(self.target if target else self.online, self.encode(s, a))
        return vals[:, 0] if single else vals

    def q_member(self, j: int, s, a) -> np.ndarray:
        return self.online[j].forward(self.encode(s, a))[:, 0]

    def q_min_target(self, s, a):
        v = self.q_all(s, a, target=True)
        return v.min(axis=0)

    def uncertainty(self, s, a):
        """Population standard deviation of the online members."""
        if self.size < 2:
            raise ValueError("uncertainty needs at least two ensemble members")
        return self.q_all(s, a).std(axis=0)

    def evaluate_bootstrap(self, s_next, a_par) -> tuple[np.ndarray, np.ndarray]:
        """One ensemble evaluation per bootstrap joint action.

        Returns ``(target_values, online_values)``, each ``(J, B)``, and
        advances :attr:`bootstrap_evals` by ``B``.
        """
        x = self.encode(s_next, a_par)
        self.bootstrap_evals += x.shape[0]
        return self._values(self.target, x), self._values(self.online, x)

    def polyak_targets(self, tau: float) -> None:
        for t, o in zip(self.target, self.online):
            polyak(t, o, tau)

    def to_dicts(self, optimizers=None) -> list[dict]:
        optimizers = optimizers or [None] * self.size
        return ([net_to_dict(m, f"online_{j}", o) for j, (m, o) in enumerate(zip(self.online, optimizers))]
                + [net_to_dict(m, f"target_{j}") for j, m in enumerate(self.target)])

    def load_dicts(self, nets: list[dict]) -> list:
        by_name = {d["name"]: d for d in nets}
        opts = []
        for j in range(self.size):
            self.online[j], opt = net_from_dict(by_name[f"online_{j}"])
            self.target[j], _ = net_from_dict(by_name[f"target_{j}"])
            opts.append(opt)
        return opts


def conservative_penalty(ens: QEnsemble, batch, policy_probs, cfg: ConservativeConfig,
                         member: int = 0, with_grad: bool = False):
    """Counterfactual per-agent conservative penalty on one critic.

    ``policy_probs[i]`` is a ``(B, |A_i|)`` array of ``pi_i(.|s)``. For each
    agent the policy expectation over its own action is exact, the other
    agents' actions come from the batch. Returns the batch-mean value, and
    its parameter gradient for ``member`` when ``with_grad``.
    """
    n = ens.n
    lam = cfg.weights(n)
    B = len(batch)
    if cfg.alpha == 0.0:
        zero = GradientBundle([np.zeros_like(w) for w in ens.online[member].weights],
                              [np.zeros_like(b) for b in ens.online[member].biases])
        return (0.0, zero) if with_grad else 0.0
    states, actions, weights = [batch.s], [batch.a], [np.full(B, -cfg.alpha * lam.sum() / B)]
    for i in range(n):
        probs = np.asarray(policy_probs[i])
        if probs.shape != (B, ens.action_counts[i]):
            raise ShapeError(f"policy_probs[{i}] has shape {probs.shape}")
        for ai in range(ens.action_counts[i]):
            a = batch.a.copy()
            a[:, i] = ai
            states.append(batch.s)
            actions.append(a)
            weights.append(cfg.alpha * lam[i] * probs[:, ai] / B)
    x = ens.encode(np.vstack(states), np.vstack(actions))
    w = np.concatenate(weights)
    net = ens.online[member]
    out, cache = net.forward_cached(x)
    value = float(w @ out[:, 0])
    if not with_grad:
        return value
    return value, net.backward(x, w[:, None], cache)


@dataclass
class TdResult:
    loss: float
    td: float
    penalty: float
    grads: list[GradientBundle]


def td_loss(ens: QEnsemble, batch, targets, policy_probs=None,
            cfg: ConservativeConfig | None = None, member: int = 0) -> TdResult:
    """Batch mean of summed squared residuals over members, plus the penalty.

    ``targets`` are constants (no gradient through them).
    """
    y = np.asarray(targets, dtype=np.float64)
    B = len(batch)
    if y.shape != (B,):
        raise ValueError(f"expected {B} targets, got shape {y.shape}")
    x = ens.encode(batch.s, batch.a)
    td = 0.0
    grads = []
    for m in ens.online:
        out, cache = m.forward_cached(x)
        resid = out[:, 0] - y
        td += float(resid @ resid) / B
        grads.append(m.backward(x, (2.0 * resid / B)[:, None], cache))
    penalty = 0.0
    if cfg is not None and policy_probs is not None:
        penalty, pg = conservative_penalty(ens, batch, policy_probs, cfg, member, with_grad=True)
        grads[member] = grads[member] + pg
    return TdResult(td + penalty, td, penalty, grads)
