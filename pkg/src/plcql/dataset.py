"""Offline datasets: collection, quality tiers, coverage and the on-disk format."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from itertools import permutations
from math import prod
from pathlib import Path

import numpy as np

from .envs import Env, EnvState, GridSpreadEnv, MatrixCoopEnv, TabularEnv, MOVES
from .nn import SeededRng

FORMAT_VERSION = 1
HEADER_TAG = "#plcql-dataset "
CHECKSUM_TAG = "#sha256 "

TIER_EPS = {"expert": 0.05, "medium": 0.4}
REPLAY_EPS = (0.8, 0.6, 0.4)


class DatasetFormatError(ValueError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class VersionError(DatasetFormatError):
    pass


@dataclass
class Transition:
    s: np.ndarray
    a: tuple[int, ...]
    r: float
    s_next: np.ndarray
    a_next: tuple[int, ...] | None
    done: bool
    state_id: int | None = None
    next_state_id: int | None = None

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        return (np.array_equal(self.s, other.s) and self.a == other.a and self.r == other.r
                and np.array_equal(self.s_next, other.s_next) and self.a_next == other.a_next
                and self.done == other.done and self.state_id == other.state_id
                and self.next_state_id == other.next_state_id)


@dataclass
class Batch:
    """Array view of sampled transitions. Missing ``a_next`` entries are -1."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    a_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return self.r.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx],
                     self.a_next[idx], self.done[idx])


@dataclass
class OfflineDataset:
    transitions: list[Transition]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.metadata["size"] = len(self.transitions)
        n = self.metadata.get("n")
        counts = self.metadata.get("action_counts")
        for tr in self.transitions:
            if n is not None and len(tr.a) != n:
                raise ValueError("transition joint action length disagrees with metadata n")
            if tr.a_next is not None and len(tr.a_next) != len(tr.a):
                raise ValueError("a and a_next lengths differ")
            if counts is not None:
                for acts in (tr.a, tr.a_next or ()):
                    if any(not 0 <= x < c for x, c in zip(acts, counts)):
                        raise ValueError("action outside the agent's range")
        self._arrays: Batch | None = None

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def n(self) -> int:
        return int(self.metadata["n"])

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(self.metadata["action_counts"])

    def arrays(self) -> Batch:
        if self._arrays is None:
            trs = self.transitions
            n = self.n
            self._arrays = Batch(
                np.array([t.s for t in trs], dtype=np.float64),
                np.array([t.a for t in trs], dtype=np.int64).reshape(len(trs), n),
                np.array([t.r for t in trs], dtype=np.float64),
                np.array([t.s_next for t in trs], dtype=np.float64),
                np.array([t.a_next if t.a_next is not None else (-1,) * n for t in trs],
                         dtype=np.int64).reshape(len(trs), n),
                np.array([t.done for t in trs], dtype=bool),
            )
        return self._arrays

    def sample_batch(self, rng: SeededRng, batch_size: int) -> Batch:
        idx = rng.integers(0, len(self.transitions), size=batch_size)
        return self.arrays().subset(idx)

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return self.metadata == other.metadata and self.transitions == other.transitions


# ------------------------------------------------------------ behaviour policies

class UniformPolicy:
    def __init__(self, action_counts):
        self.action_counts = tuple(action_counts)

    def __call__(self, env: Env, state: EnvState, rng: SeededRng) -> tuple[int, ...]:
        return tuple(int(rng.integers(0, c)) for c in self.action_counts)

    def describe(self) -> str:
        return "uniform"


class FixedJointPolicy:
    """Always plays one joint action (matrix-game optimum)."""

    def __init__(self, joint, action_counts):
        self.joint = tuple(int(a) for a in joint)
        self.action_counts = tuple(action_counts)

    def __call__(self, env, state, rng):
        return self.joint

    def describe(self) -> str:
        return f"fixed{list(self.joint)}"


class TabularJointPolicy:
    """Deterministic joint action per tabular state id."""

    def __init__(self, joint_by_state, action_counts):
        self.joint_by_state = [tuple(int(x) for x in j) for j in joint_by_state]
        self.action_counts = tuple(action_counts)

    def __call__(self, env, state, rng):
        return self.joint_by_state[state.state_id]

    def describe(self) -> str:
        return "tabular-optimal"


class GreedyAssignmentPolicy:
    """Scripted grid-spread expert.

    Agents are matched to landmarks by the assignment minimising total
    Manhattan distance (brute force over permutations, first found wins) and
    each agent steps toward its landmark, rows before columns.
    """

    def __init__(self, env: GridSpreadEnv):
        self.landmarks = env.landmarks
        self.action_counts = env.spec.action_counts

    def __call__(self, env, state, rng):
        agents = state.internal
        best, best_cost = None, None
        for perm in permutations(range(len(self.landmarks))):
            cost = sum(abs(agents[i][0] - self.landmarks[p][0]) + abs(agents[i][1] - self.landmarks[p][1])
                       for i, p in enumerate(perm))
            if best_cost is None or cost < best_cost:
                best, best_cost = perm, cost
        acts = []
        for i, p in enumerate(best):
            (ar, ac), (lr, lc) = agents[i], self.landmarks[p]
            if lr != ar:
                move = (int(np.sign(lr - ar)), 0)
            elif lc != ac:
                move = (0, int(np.sign(lc - ac)))
            else:
                move = (0, 0)
            acts.append(MOVES.index(move))
        return tuple(acts)

    def describe(self) -> str:
        return "greedy-assignment"


class EpsilonGreedyPolicy:
    """Each agent independently replaces its base action by a uniform one w.p. eps."""

    def __init__(self, base, eps: float):
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        self.base = base
        self.eps = eps
        self.action_counts = base.action_counts

    def __call__(self, env, state, rng):
        base = self.base(env, state, rng)
        out = []
        for ai, c in zip(base, self.action_counts):
            if rng.random() < self.eps:
                out.append(int(rng.integers(0, c)))
            else:
                out.append(int(ai))
        return tuple(out)

    def describe(self) -> str:
        return f"eps-greedy({self.eps})[{self.base.describe()}]"


def expert_policy(env: Env):
    if isinstance(env, MatrixCoopEnv):
        joint = np.unravel_index(int(np.argmax(env.payoff)), env.payoff.shape)
        return FixedJointPolicy(joint, env.spec.action_counts)
    if isinstance(env, GridSpreadEnv):
        return GreedyAssignmentPolicy(env)
    if isinstance(env, TabularEnv):
        from .oracle import optimal_joint_actions
        joints = optimal_joint_actions(env.mdp, env.spec.gamma)
        return TabularJointPolicy(joints, env.spec.action_counts)
    raise ValueError(f"no expert available for {type(env).__name__}")


# ------------------------------------------------------------------ collection

def _metadata(env: Env, tier: str, behaviour: str, seed: int, **extra) -> dict:
    desc = env.describe()
    env_hash = hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]
    return {"env": desc, "env_hash": env_hash, "tier": tier, "behaviour": behaviour,
            "n": env.spec.n, "action_counts": list(env.spec.action_counts),
            "feature_dim": env.spec.feature_dim, "seed": int(seed), **extra}


def _rollouts(env: Env, behaviour, rng: SeededRng, episodes: int | None = None,
              max_transitions: int | None = None) -> list[Transition]:
    if tuple(behaviour.action_counts) != tuple(env.spec.action_counts):
        raise ValueError("behaviour policy action ranges do not match the environment")
    out: list[Transition] = []
    ep = 0
    while True:
        if episodes is not None and ep >= episodes:
            break
        if max_transitions is not None and len(out) >= max_transitions:
            break
        state = env.reset(rng)
        a = behaviour(env, state, rng)
        done = False
        while not done:
            nxt, r, done = env.step(state, a, rng)
            a_next = None if done else behaviour(env, nxt, rng)
            out.append(Transition(state.features.copy(), tuple(a), float(r), nxt.features.copy(),
                                  a_next, bool(done), state.state_id, nxt.state_id))
            state, a = nxt, a_next
        ep += 1
    if max_transitions is not None:
        out = out[:max_transitions]
    return out


def collect(env: Env, behaviour, episodes: int, seed: int, tier: str = "custom") -> OfflineDataset:
    """Roll out ``behaviour`` for ``episodes`` episodes, in trajectory order."""
    rng = SeededRng(seed)
    trs = _rollouts(env, behaviour, rng, episodes=episodes)
    desc = behaviour.describe() if hasattr(behaviour, "describe") else type(behaviour).__name__
    return OfflineDataset(trs, _metadata(env, tier, desc, seed, episodes=episodes))


def make_tier(env: Env, tier: str, size: int, seed: int) -> OfflineDataset:
    """Build a dataset of exactly ``size`` transitions for a named quality tier."""
    if size < 1:
        raise ValueError("size must be >= 1")
    if tier == "random":
        beh = UniformPolicy(env.spec.action_counts)
        trs = _rollouts(env, beh, SeededRng(seed), max_transitions=size)
        return OfflineDataset(trs, _metadata(env, tier, beh.describe(), seed))
    if tier in TIER_EPS:
        beh = EpsilonGreedyPolicy(expert_policy(env), TIER_EPS[tier])
        trs = _rollouts(env, beh, SeededRng(seed), max_transitions=size)
        return OfflineDataset(trs, _metadata(env, tier, beh.describe(), seed))
    if tier == "medium_replay":
        expert = expert_policy(env)
        parts = [size // 3 + (1 if i < size % 3 else 0) for i in range(3)]
        trs, segments = [], []
        for i, (eps, count) in enumerate(zip(REPLAY_EPS, parts)):
            beh = EpsilonGreedyPolicy(expert, eps)
            seg = _rollouts(env, beh, SeededRng(seed).spawn(i), max_transitions=count) if count else []
            trs.extend(seg)
            segments.append({"eps": eps, "count": len(seg)})
        return OfflineDataset(trs, _metadata(env, tier, f"mixture{list(REPLAY_EPS)}[{expert.describe()}]",
                                             seed, segments=segments))
    raise ValueError(f"unknown tier {tier!r}")


def episode_returns(ds: OfflineDataset) -> list[float]:
    """Undiscounted returns of the complete episodes in a dataset."""
    out, acc = [], 0.0
    for tr in ds.transitions:
        acc += tr.r
        if tr.done:
            out.append(acc)
            acc = 0.0
    return out


# -------------------------------------------------------------------- coverage

@dataclass
class CoverageReport:
    joint_coverage: float
    marginal_coverage: list[float]
    counts: dict
    per_state: bool


def coverage(ds: OfflineDataset) -> CoverageReport:
    """Exact joint and marginal coverage.

    With state ids the fractions are averaged over the observed states,
    otherwise computed globally over distinct joint actions.
    """
    if len(ds) == 0:
        raise ValueError("coverage of an empty dataset")
    counts_arr = ds.action_counts
    joint_size = prod(counts_arr)
    counts: dict = {}
    per_state = all(tr.state_id is not None for tr in ds.transitions)
    groups: dict = {}
    for tr in ds.transitions:
        key = tr.state_id if per_state else None
        groups.setdefault(key, set()).add(tr.a)
        ck = (tr.state_id, tr.a) if per_state else tr.a
        counts[ck] = counts.get(ck, 0) + 1
    joint_fracs, marg_fracs = [], []
    for joints in groups.values():
        joint_fracs.append(len(joints) / joint_size)
        marg_fracs.append([len({j[i] for j in joints}) / c for i, c in enumerate(counts_arr)])
    return CoverageReport(float(np.mean(joint_fracs)),
                          [float(v) for v in np.mean(np.array(marg_fracs), axis=0)],
                          counts, per_state)


# ------------------------------------------------------------------ file format

def _columns(d: int, n: int) -> list[str]:
    return ([f"s{i}" for i in range(d)] + [f"a{i}" for i in range(n)] + ["r"]
            + [f"s_next{i}" for i in range(d)] + [f"a_next{i}" for i in range(n)]
            + ["done", "state_id", "next_state_id"])


def _opt(v) -> str:
    return "" if v is None else str(int(v))


def _dumps(ds: OfflineDataset) -> str:
    n = ds.n
    d = int(ds.metadata.get("feature_dim", len(ds.transitions[0].s) if ds.transitions else 0))
    buf = io.StringIO()
    meta = dict(ds.metadata, format_version=FORMAT_VERSION, feature_dim=d)
    buf.write(HEADER_TAG + json.dumps(meta, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_columns(d, n))
    for tr in ds.transitions:
        a_next = [str(x) for x in tr.a_next] if tr.a_next is not None else [""] * n
        w.writerow([repr(float(x)) for x in tr.s] + [str(x) for x in tr.a] + [repr(float(tr.r))]
                   + [repr(float(x)) for x in tr.s_next] + a_next
                   + [str(int(tr.done)), _opt(tr.state_id), _opt(tr.next_state_id)])
    return buf.getvalue()


def save(ds: OfflineDataset, path) -> None:
    body = _dumps(ds)
    digest = hashlib.sha256(body.encode()).hexdigest()
    Path(path).write_text(body + CHECKSUM_TAG + digest + "\n")


def load(path) -> OfflineDataset:
    text = Path(path).read_text()
    if not text.startswith(HEADER_TAG):
        raise DatasetFormatError("missing dataset header line")
    header, _, _ = text.partition("\n")
    try:
        meta = json.loads(header[len(HEADER_TAG):])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"unreadable header: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"dataset format_version {meta.get('format_version')!r}, "
                           f"this reader supports {FORMAT_VERSION}")
    body, sep, tail = text.rpartition(CHECKSUM_TAG)
    if not sep or not tail.endswith("\n"):
        raise ChecksumError("checksum line missing; file truncated?")
    if hashlib.sha256(body.encode()).hexdigest() != tail.strip():
        raise ChecksumError("checksum mismatch")
    meta.pop("format_version")
    n, d = int(meta["n"]), int(meta["feature_dim"])
    rows = list(csv.reader(io.StringIO(body.partition("\n")[2])))
    if rows[0] != _columns(d, n):
        raise DatasetFormatError("unexpected column header")
    trs = []
    for row in rows[1:]:
        pos = 0
        s = np.array([float(x) for x in row[pos:pos + d]]); pos += d
        a = tuple(int(x) for x in row[pos:pos + n]); pos += n
        r = float(row[pos]); pos += 1
        s2 = np.array([float(x) for x in row[pos:pos + d]]); pos += d
        raw_next = row[pos:pos + n]; pos += n
        a_next = None if raw_next[0] == "" else tuple(int(x) for x in raw_next)
        done = row[pos] == "1"
        sid = int(row[pos + 1]) if row[pos + 1] else None
        nsid = int(row[pos + 2]) if row[pos + 2] else None
        trs.append(Transition(s, a, r, s2, a_next, done, sid, nsid))
    size = meta.get("size")
    ds = OfflineDataset(trs, meta)
    if size is not None and size != len(trs):
        raise DatasetFormatError("metadata size disagrees with stored transitions")
    return ds
