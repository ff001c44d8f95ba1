"""Exact tabular machinery used to check operator and bound claims."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .envs import TabularDecMDP, check_tabular_size, random_decmdp
from .nn import SeededRng
from .par import _backup, exact_operator_apply, mixture_distribution, mixture_operator_apply, product_distribution


@dataclass
class ExactPolicy:
    """Per-agent tables ``tables[i][s, a_i]``; the joint law is their product."""

    tables: list[np.ndarray]

    def __post_init__(self):
        self.tables = [np.asarray(t, dtype=np.float64) for t in self.tables]
        for t in self.tables:
            if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-12, rtol=0):
                raise ValueError("policy rows must be probability distributions")

    @property
    def n(self) -> int:
        return len(self.tables)

    def joint(self) -> np.ndarray:
        return product_distribution(self.tables)

    @classmethod
    def from_joint_actions(cls, mdp: TabularDecMDP, joints) -> "ExactPolicy":
        tables = [np.zeros((mdp.num_states, c)) for c in mdp.action_counts]
        for s, ja in enumerate(joints):
            for i, ai in enumerate(ja):
                tables[i][s, ai] = 1.0
        return cls(tables)


def _joint_matrix(mdp: TabularDecMDP, policy) -> np.ndarray:
    pm = policy.joint() if isinstance(policy, ExactPolicy) else np.asarray(policy, dtype=np.float64)
    if pm.shape != mdp.R.shape:
        raise ValueError(f"joint policy shape {pm.shape} != {mdp.R.shape}")
    return pm


def exact_policy_eval(mdp: TabularDecMDP, policy, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Solve the linear Bellman system; returns ``(V, Q)``."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    check_tabular_size(mdp.num_states, mdp.joint_size)
    pm = _joint_matrix(mdp, policy)
    P_pi = np.einsum("sa,sat->st", pm, mdp.P)
    r_pi = (pm * mdp.R).sum(axis=1)
    A = np.eye(mdp.num_states) - gamma * P_pi
    V = np.linalg.solve(A, r_pi)
    resid = np.abs(A @ V - r_pi).max()
    if resid > 1e-10:
        raise FloatingPointError(f"policy evaluation residual {resid:.3e}")
    Q = mdp.R + gamma * mdp.P @ V
    return V, Q


def occupancy(mdp: TabularDecMDP, policy, gamma: float) -> np.ndarray:
    """Normalised discounted state occupancy from the initial distribution."""
    pm = _joint_matrix(mdp, policy)
    P_pi = np.einsum("sa,sat->st", pm, mdp.P)
    d = np.linalg.solve((np.eye(mdp.num_states) - gamma * P_pi).T, mdp.init)
    return (1.0 - gamma) * d


def tv(p, q) -> float:
    """Total variation, half the L1 distance."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for v in (p, q):
        if v.shape != p.shape or np.any(v < -1e-15) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError("tv expects two distributions over the same support")
    return 0.5 * float(np.abs(p - q).sum())


def optimal_values(mdp: TabularDecMDP, gamma: float, support: np.ndarray | None = None,
                   tol: float = 1e-12, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Optimal ``V`` and greedy joint indices, optionally restricted to a joint-action mask."""
    mask = np.ones(mdp.R.shape, dtype=bool) if support is None else np.asarray(support, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("every state needs at least one supported joint action")
    V = np.zeros(mdp.num_states)
    for _ in range(max_iter):
        Q = np.where(mask, mdp.R + gamma * mdp.P @ V, -np.inf)
        V_new = Q.max(axis=1)
        done = np.abs(V_new - V).max() <= tol
        V = V_new
        if done:
            break
    Q = np.where(mask, mdp.R + gamma * mdp.P @ V, -np.inf)
    greedy = Q.argmax(axis=1)
    pm = np.zeros(mdp.R.shape)
    pm[np.arange(mdp.num_states), greedy] = 1.0
    V_exact, _ = exact_policy_eval(mdp, pm, gamma)
    return V_exact, greedy


def optimal_joint_actions(mdp: TabularDecMDP, gamma: float) -> list[tuple[int, ...]]:
    _, greedy = optimal_values(mdp, gamma)
    return [mdp.joint_action(j) for j in greedy]


@dataclass
class FqiResult:
    Q: np.ndarray
    residual: float
    iterations: int


def fqi_fixed_point(mdp: TabularDecMDP, policy, behaviour, k_probs, gamma: float,
                    tol: float = 1e-12, max_iter: int = 1_000_000) -> FqiResult:
    """Iterate the mixture replacement operator from zero to a sup-norm residual <= ``tol``."""
    Q = np.zeros(mdp.R.shape)
    next_dist = mixture_distribution(policy, behaviour, k_probs)
    for it in range(1, max_iter + 1):
        Q_new = _backup(mdp, Q, next_dist, gamma)
        residual = float(np.abs(Q_new - Q).max())
        Q = Q_new
        if residual <= tol:
            return FqiResult(Q, residual, it)
    raise RuntimeError(f"no convergence after {max_iter} iterations (residual {residual:.3e})")


def expected_k(mdp: TabularDecMDP, policy, k_probs, gamma: float) -> float:
    n = len(mdp.action_counts)
    kp = np.broadcast_to(np.asarray(k_probs, dtype=np.float64), (mdp.num_states, n))
    d = occupancy(mdp, policy, gamma)
    return float(d @ (kp @ np.arange(1, n + 1)))


def tv_bar(pi: ExactPolicy, mu: ExactPolicy, weights: np.ndarray | None = None) -> float:
    """Mean over agents of the per-agent TV; sup over states, or weighted by ``weights``."""
    per_agent = []
    for p, q in zip(pi.tables, mu.tables):
        per_state = np.array([tv(p[s], q[s]) for s in range(p.shape[0])])
        per_agent.append(per_state.max() if weights is None else float(weights @ per_state))
    return float(np.mean(per_agent))


@dataclass
class BoundReport:
    measured_gap: float
    eps_subopt: float
    eps_fqi: float
    expected_k: float
    tv_bar: float
    shift_term: float
    bound_value: float
    holds: bool
    gamma: float
    n: int
    measured_gap_dpi: float
    eps_subopt_dpi: float
    tv_bar_dpi: float

    def as_row(self) -> dict:
        return asdict(self)


def check_bound(mdp: TabularDecMDP, pi: ExactPolicy, mu: ExactPolicy, k_probs, gamma: float,
                fqi_tol: float = 1e-12) -> BoundReport:
    """Compare the replacement fixed point against exact ``V^pi`` and the bound."""
    V_pi, _ = exact_policy_eval(mdp, pi, gamma)
    fqi = fqi_fixed_point(mdp, pi, mu, k_probs, gamma, tol=fqi_tol)
    V_hat = (pi.joint() * fqi.Q).sum(axis=1)
    gap = np.abs(V_pi - V_hat)

    support = product_distribution([(t > 0).astype(np.float64) for t in mu.tables]) > 0
    V_sup, _ = optimal_values(mdp, gamma, support)
    sub = V_sup - V_pi
    d = occupancy(mdp, pi, gamma)

    ek = expected_k(mdp, pi, k_probs, gamma)
    tvb = tv_bar(pi, mu)
    shift = 4.0 * gamma / (1.0 - gamma) ** 2 * ek * tvb
    eps_sub = max(0.0, float(sub.max()))
    bound = eps_sub + fqi.residual + shift
    return BoundReport(
        measured_gap=float(gap.max()), eps_subopt=eps_sub, eps_fqi=fqi.residual,
        expected_k=ek, tv_bar=tvb, shift_term=shift, bound_value=bound,
        holds=bool(gap.max() <= bound + 1e-9), gamma=gamma, n=pi.n,
        measured_gap_dpi=float(d @ gap), eps_subopt_dpi=max(0.0, float(d @ sub)),
        tv_bar_dpi=tv_bar(pi, mu, d),
    )


# ------------------------------------------------------------ random instances

@dataclass
class Instance:
    mdp: TabularDecMDP
    pi: ExactPolicy
    mu: ExactPolicy
    gamma: float
    seed: int


def random_policy(rng: SeededRng, states: int, action_counts, sparsity: float = 0.0) -> ExactPolicy:
    """Random per-agent tables; ``sparsity`` zeroes entries while keeping one action per row."""
    tables = []
    for c in action_counts:
        t = rng.dirichlet(np.ones(c), size=states)
        if sparsity > 0:
            keep = rng.random((states, c)) >= sparsity
            keep[np.arange(states), rng.integers(0, c, size=states)] = True
            t = t * keep
            t /= t.sum(axis=1, keepdims=True)
        tables.append(t)
    return ExactPolicy(tables)


def random_instance(seed: int, max_agents: int = 3, max_states: int = 5, max_actions: int = 3,
                    reward_scale: float = 1.0) -> Instance:
    rng = SeededRng(seed)
    n = int(rng.integers(2, max_agents + 1))
    S = int(rng.integers(1, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    gamma = float(rng.uniform(0.5, 0.95))
    mdp = random_decmdp(int(rng.integers(0, 2**31)), n, S, A, reward_scale)
    pi = random_policy(rng, S, mdp.action_counts)
    mu = random_policy(rng, S, mdp.action_counts, sparsity=0.3)
    return Instance(mdp, pi, mu, gamma, seed)


K_MODES = ("k1", "uniform", "kn")


def k_distribution(mode: str, n: int) -> np.ndarray:
    if mode == "k1":
        return np.eye(n)[0]
    if mode == "kn":
        return np.eye(n)[n - 1]
    if mode == "uniform":
        return np.full(n, 1.0 / n)
    raise ValueError(f"unknown k mode {mode!r}")


def contraction_ratios(inst: Instance, rng: SeededRng, pairs: int = 10, scale: float = 10.0):
    """Yield ``(k_label, lhs, rhs)`` for every ``k``, the mixture, and each random table pair."""
    mdp, n = inst.mdp, inst.mdp.n
    mix = rng.dirichlet(np.ones(n), size=mdp.num_states)
    for _ in range(pairs):
        Q1 = rng.uniform(-scale, scale, size=mdp.R.shape)
        Q2 = rng.uniform(-scale, scale, size=mdp.R.shape)
        rhs = inst.gamma * float(np.abs(Q1 - Q2).max())
        for k in range(1, n + 1):
            T1 = exact_operator_apply(mdp, Q1, inst.pi, inst.mu, k, inst.gamma)
            T2 = exact_operator_apply(mdp, Q2, inst.pi, inst.mu, k, inst.gamma)
            yield f"k={k}", float(np.abs(T1 - T2).max()), rhs
        T1 = mixture_operator_apply(mdp, Q1, inst.pi, inst.mu, mix, inst.gamma)
        T2 = mixture_operator_apply(mdp, Q2, inst.pi, inst.mu, mix, inst.gamma)
        yield "mixture", float(np.abs(T1 - T2).max()), rhs


def bound_sweep(instances: int = 50, seed: int = 0) -> list[dict]:
    """Bound reports for ``instances`` random instances times every k mode."""
    rows = []
    for idx in range(instances):
        inst = random_instance(seed * 100_003 + idx)
        for mode in K_MODES:
            rep = check_bound(inst.mdp, inst.pi, inst.mu, k_distribution(mode, inst.mdp.n), inst.gamma)
            rows.append({"instance": idx, "k_mode": mode, "states": inst.mdp.num_states,
                         "actions_per_agent": inst.mdp.action_counts[0], **rep.as_row()})
    return rows
