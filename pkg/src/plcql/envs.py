"""Cooperative Dec-MDP environments with discrete per-agent actions."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from math import prod

import numpy as np

from .nn import SeededRng

MAX_TABULAR_ENTRIES = 10**6

# grid-spread moves: stay, up, down, left, right as (drow, dcol)
MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class DecMdpSpec:
    n: int
    action_counts: tuple[int, ...]
    feature_dim: int
    gamma: float = 0.99
    horizon: int = 1

    def __post_init__(self):
        if self.n < 1 or len(self.action_counts) != self.n:
            raise ValueError("action_counts must list one count per agent")
        if any(c < 1 for c in self.action_counts):
            raise ValueError("every agent needs at least one action")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def joint_size(self) -> int:
        return prod(self.action_counts)


@dataclass
class EnvState:
    t: int
    features: np.ndarray
    internal: tuple = ()
    state_id: int | None = None


class Env:
    """Common surface: ``reset``, ``step``, ``spec``, ``reward_bounds``."""

    spec: DecMdpSpec

    def check_action(self, joint_action) -> tuple[int, ...]:
        a = tuple(int(x) for x in joint_action)
        if len(a) != self.spec.n:
            raise ValueError(f"expected {self.spec.n} actions, got {len(a)}")
        for i, (ai, c) in enumerate(zip(a, self.spec.action_counts)):
            if not 0 <= ai < c:
                raise ValueError(f"action {ai} out of range for agent {i} (|A_i|={c})")
        return a

    def clone(self) -> "Env":
        return copy.deepcopy(self)

    def reward_bounds(self) -> tuple[float, float]:
        raise NotImplementedError

    def return_range(self) -> float:
        """Width of the achievable episode-return interval."""
        lo, hi = self.reward_bounds()
        return self.spec.horizon * (hi - lo)

    def describe(self) -> dict:
        raise NotImplementedError


class MatrixCoopEnv(Env):
    """One-shot cooperative matrix game; reward is ``payoff[joint action]``."""

    kind = "matrix"

    def __init__(self, n: int, actions_per_agent: int, payoff):
        payoff = np.asarray(payoff, dtype=np.float64)
        if payoff.shape != (actions_per_agent,) * n:
            raise ValueError(f"payoff shape {payoff.shape} != {(actions_per_agent,) * n}")
        self.payoff = payoff
        self.spec = DecMdpSpec(n, (actions_per_agent,) * n, feature_dim=1, gamma=0.99, horizon=1)

    def reset(self, rng: SeededRng | None = None) -> EnvState:
        return EnvState(0, np.ones(1), (), state_id=0)

    def step(self, state: EnvState, joint_action, rng: SeededRng | None = None):
        a = self.check_action(joint_action)
        r = float(self.payoff[a])
        return EnvState(state.t + 1, np.ones(1), (), state_id=0), r, True

    def reward_bounds(self):
        return float(self.payoff.min()), float(self.payoff.max())

    def describe(self) -> dict:
        return {"kind": self.kind, "n": self.spec.n, "actions_per_agent": self.spec.action_counts[0],
                "payoff": self.payoff.tolist()}


def matrix_coop_make(n: int, actions_per_agent: int, payoff) -> MatrixCoopEnv:
    return MatrixCoopEnv(n, actions_per_agent, payoff)


def all_equal_payoff(n: int, actions_per_agent: int) -> np.ndarray:
    """Indicator payoff: 1 when every agent picks the same action."""
    idx = np.indices((actions_per_agent,) * n)
    return np.all(idx == idx[0], axis=0).astype(np.float64)


class GridSpreadEnv(Env):
    """Discrete cooperative navigation.

    ``n`` agents and ``n`` landmarks on a ``side x side`` grid. Landmarks are
    fixed by the construction seed; agent start cells are drawn on reset.
    Team reward is minus the summed nearest-agent Manhattan distance over
    landmarks, minus ``collision_penalty`` per cell holding several agents.
    """

    kind = "grid_spread"

    def __init__(self, n: int, grid_side: int, horizon: int, seed: int,
                 collision_penalty: float = 1.0, landmarks=None):
        if grid_side < 2:
            raise ValueError("grid_side must be >= 2")
        if n < 1 or n > grid_side * grid_side:
            raise ValueError("n must satisfy 1 <= n <= grid_side**2")
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        self.side = grid_side
        self.seed = seed
        self.collision_penalty = float(collision_penalty)
        if landmarks is None:
            cells = SeededRng(seed).permutation(grid_side * grid_side)[:n]
            landmarks = [divmod(int(c), grid_side) for c in cells]
        self.landmarks = tuple(tuple(int(v) for v in lm) for lm in landmarks)
        if len(self.landmarks) != n:
            raise ValueError("need exactly n landmarks")
        self.spec = DecMdpSpec(n, (5,) * n, feature_dim=4 * n, gamma=0.99, horizon=horizon)

    def _coord(self, v: int) -> float:
        return 2.0 * v / (self.side - 1) - 1.0

    def featurize(self, agents) -> np.ndarray:
        out = [self._coord(v) for pos in agents for v in pos]
        out += [self._coord(v) for pos in self.landmarks for v in pos]
        return np.array(out)

    def make_state(self, agents, t: int = 0) -> EnvState:
        agents = tuple(tuple(int(v) for v in p) for p in agents)
        return EnvState(t, self.featurize(agents), agents)

    def reward(self, agents) -> float:
        dist = 0
        for lr, lc in self.landmarks:
            dist += min(abs(lr - ar) + abs(lc - ac) for ar, ac in agents)
        counts: dict[tuple, int] = {}
        for p in agents:
            counts[p] = counts.get(p, 0) + 1
        collided = sum(1 for c in counts.values() if c > 1)
        return -float(dist) - self.collision_penalty * collided

    def move(self, pos, action: int):
        dr, dc = MOVES[action]
        r = min(max(pos[0] + dr, 0), self.side - 1)
        c = min(max(pos[1] + dc, 0), self.side - 1)
        return (r, c)

    def reset(self, rng: SeededRng) -> EnvState:
        cells = rng.integers(0, self.side * self.side, size=self.spec.n)
        return self.make_state([divmod(int(c), self.side) for c in cells])

    def step(self, state: EnvState, joint_action, rng: SeededRng | None = None):
        a = self.check_action(joint_action)
        agents = tuple(self.move(p, ai) for p, ai in zip(state.internal, a))
        r = self.reward(agents)
        nxt = self.make_state(agents, state.t + 1)
        return nxt, r, nxt.t >= self.spec.horizon

    def reward_bounds(self):
        n = self.spec.n
        worst_dist = n * 2 * (self.side - 1)
        return -float(worst_dist) - self.collision_penalty * (n // 2), 0.0

    def describe(self) -> dict:
        return {"kind": self.kind, "n": self.spec.n, "grid_side": self.side,
                "horizon": self.spec.horizon, "seed": self.seed,
                "collision_penalty": self.collision_penalty,
                "landmarks": [list(lm) for lm in self.landmarks]}


def grid_spread_make(n: int, grid_side: int, horizon: int, seed: int,
                     collision_penalty: float = 1.0) -> GridSpreadEnv:
    return GridSpreadEnv(n, grid_side, horizon, seed, collision_penalty)


@dataclass
class TabularDecMDP:
    """Exact Dec-MDP. Joint actions are flattened row-major over agents."""

    n: int
    action_counts: tuple[int, ...]
    P: np.ndarray  # (S, A_joint, S)
    R: np.ndarray  # (S, A_joint)
    init: np.ndarray  # (S,)
    r_max: float = field(default=0.0)

    def __post_init__(self):
        self.action_counts = tuple(int(c) for c in self.action_counts)
        S, A = self.R.shape
        if self.P.shape != (S, A, S) or A != prod(self.action_counts):
            raise ValueError("P/R shapes inconsistent with action counts")
        if not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition rows must sum to 1")
        if not self.r_max:
            self.r_max = float(np.abs(self.R).max())

    @property
    def num_states(self) -> int:
        return self.R.shape[0]

    @property
    def joint_size(self) -> int:
        return self.R.shape[1]

    def joint_index(self, joint_action) -> int:
        return int(np.ravel_multi_index(tuple(int(a) for a in joint_action), self.action_counts))

    def joint_action(self, index: int) -> tuple[int, ...]:
        return tuple(int(v) for v in np.unravel_index(int(index), self.action_counts))

    def to_dict(self) -> dict:
        return {"n": self.n, "action_counts": list(self.action_counts),
                "states": self.num_states, "P": self.P.ravel().tolist(),
                "R": self.R.ravel().tolist(), "init": self.init.tolist(), "r_max": self.r_max}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularDecMDP":
        S, counts = d["states"], tuple(d["action_counts"])
        A = prod(counts)
        return cls(d["n"], counts, np.array(d["P"]).reshape(S, A, S),
                   np.array(d["R"]).reshape(S, A), np.array(d["init"]), d["r_max"])


def check_tabular_size(states: int, joint: int) -> None:
    if joint * states * states > MAX_TABULAR_ENTRIES:
        raise ValueError(f"tabular instance too large: {joint}*{states}^2 > {MAX_TABULAR_ENTRIES}")


def random_decmdp(seed: int, n: int, states: int, actions_per_agent: int,
                  reward_scale: float = 1.0) -> TabularDecMDP:
    if min(n, states, actions_per_agent) < 1:
        raise ValueError("all sizes must be >= 1")
    joint = actions_per_agent ** n
    check_tabular_size(states, joint)
    rng = SeededRng(seed)
    raw = rng.uniform(1e-3, 1.0, size=(states, joint, states)) ** 3
    P = raw / raw.sum(axis=2, keepdims=True)
    R = rng.uniform(-reward_scale, reward_scale, size=(states, joint))
    init = np.full(states, 1.0 / states)
    return TabularDecMDP(n, (actions_per_agent,) * n, P, R, init, r_max=float(reward_scale))


class TabularEnv(Env):
    """Episodic wrapper around a :class:`TabularDecMDP` with one-hot features."""

    kind = "tabular"

    def __init__(self, mdp: TabularDecMDP, horizon: int, gamma: float = 0.99, seed: int | None = None):
        self.mdp = mdp
        self.seed = seed
        self.spec = DecMdpSpec(mdp.n, mdp.action_counts, mdp.num_states, gamma, horizon)

    def features(self, s: int) -> np.ndarray:
        f = np.zeros(self.mdp.num_states)
        f[s] = 1.0
        return f

    def _state(self, s: int, t: int) -> EnvState:
        return EnvState(t, self.features(s), (s,), state_id=s)

    def reset(self, rng: SeededRng) -> EnvState:
        return self._state(int(rng.categorical(self.mdp.init)), 0)

    def step(self, state: EnvState, joint_action, rng: SeededRng):
        a = self.check_action(joint_action)
        j = self.mdp.joint_index(a)
        s = state.state_id
        r = float(self.mdp.R[s, j])
        s2 = int(rng.categorical(self.mdp.P[s, j]))
        nxt = self._state(s2, state.t + 1)
        return nxt, r, nxt.t >= self.spec.horizon

    def reward_bounds(self):
        return float(self.mdp.R.min()), float(self.mdp.R.max())

    def describe(self) -> dict:
        return {"kind": self.kind, "n": self.spec.n, "states": self.mdp.num_states,
                "actions_per_agent": self.spec.action_counts[0], "horizon": self.spec.horizon,
                "seed": self.seed, "reward_scale": self.mdp.r_max}


def step(env: Env, state: EnvState, joint_action, rng: SeededRng | None = None):
    return env.step(state, joint_action, rng)
