import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plcql.envs import (DecMdpSpec, TabularDecMDP, TabularEnv, all_equal_payoff, grid_spread_make,
                        matrix_coop_make, random_decmdp)
from plcql.nn import SeededRng


def test_spec_joint_size():
    assert DecMdpSpec(3, (2, 3, 4), 5).joint_size == 24


def test_matrix_game_lookup():
    env = matrix_coop_make(2, 2, [[1, 0], [0, 1]])
    s = env.reset()
    assert env.step(s, (0, 0))[1] == 1.0
    _, r, done = env.step(s, (0, 1))
    assert r == 0.0 and done


def test_matrix_all_equal_has_two_winners():
    env = matrix_coop_make(3, 2, all_equal_payoff(3, 2))
    s = env.reset()
    wins = sum(env.step(s, ja)[1] for ja in itertools.product(range(2), repeat=3))
    assert wins == 2


def test_matrix_rejects_bad_payoff_and_actions():
    with pytest.raises(ValueError):
        matrix_coop_make(2, 2, np.zeros((2, 3)))
    env = matrix_coop_make(2, 2, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        env.step(env.reset(), (0, 2))


def test_grid_zero_reward_when_covered():
    env = grid_spread_make(2, 3, 5, seed=0)
    s = env.make_state(env.landmarks)
    assert env.reward(s.internal) == 0.0


def test_grid_hand_example():
    env = grid_spread_make(2, 3, 5, seed=0)
    env.landmarks = ((0, 1), (2, 1))
    assert env.reward(((0, 0), (2, 2))) == -2.0


def test_grid_wall_clamp():
    env = grid_spread_make(1, 3, 5, seed=0)
    s = env.make_state([(0, 1)])
    nxt, _, _ = env.step(s, (1,))
    assert nxt.internal == ((0, 1),)


def test_grid_single_collision_penalty():
    env = grid_spread_make(2, 3, 5, seed=0)
    env.landmarks = ((2, 2), (2, 0))
    s = env.make_state([(0, 0), (0, 2)])
    # both step onto (0, 1): distances 3 + 3, one collided cell
    nxt, r, _ = env.step(s, (4, 3))
    assert nxt.internal == ((0, 1), (0, 1))
    assert r == -6.0 - 1.0


def test_grid_invalid_sizes():
    with pytest.raises(ValueError):
        grid_spread_make(2, 1, 5, 0)
    with pytest.raises(ValueError):
        grid_spread_make(5, 2, 5, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(2, 4))
def test_grid_reward_and_features_properties(seed, n, side):
    if n > side * side:
        return
    env = grid_spread_make(n, side, 3, seed)
    rng = SeededRng(seed)
    s = env.reset(rng)
    for _ in range(3):
        assert np.all(np.abs(s.features) <= 1.0) and s.features.size == env.spec.feature_dim
        a = tuple(int(rng.integers(0, 5)) for _ in range(n))
        s, r, _ = env.step(s, a)
        lo, hi = env.reward_bounds()
        assert lo <= r <= 0.0 == hi
        covered = set(env.landmarks) <= set(s.internal) and len(set(s.internal)) == n
        assert (r == 0.0) == covered


def test_grid_episode_terminates_at_horizon():
    env = grid_spread_make(2, 3, 4, 0)
    s, rng = env.reset(SeededRng(0)), SeededRng(1)
    dones = []
    for _ in range(4):
        s, _, d = env.step(s, (0, 0))
        dones.append(d)
    assert dones == [False, False, False, True]


def test_random_decmdp_rows_and_determinism():
    m1 = random_decmdp(3, 2, 4, 3)
    m2 = random_decmdp(3, 2, 4, 3)
    m3 = random_decmdp(4, 2, 4, 3)
    assert np.abs(m1.P.sum(axis=2) - 1.0).max() <= 1e-12
    assert np.array_equal(m1.P, m2.P) and np.array_equal(m1.R, m2.R)
    assert not np.array_equal(m1.P, m3.P)
    assert np.abs(m1.R).max() <= m1.r_max


def test_random_decmdp_size_guard():
    with pytest.raises(ValueError):
        random_decmdp(0, 6, 200, 5)


def test_tabular_dict_round_trip():
    m = random_decmdp(1, 2, 3, 2)
    m2 = TabularDecMDP.from_dict(m.to_dict())
    assert np.array_equal(m.P, m2.P) and np.array_equal(m.R, m2.R)


def test_tabular_deterministic_row_successor():
    m = random_decmdp(1, 2, 3, 2)
    m.P[:] = 0.0
    m.P[:, :, 2] = 1.0
    env = TabularEnv(m, horizon=3)
    s = env.reset(SeededRng(0))
    nxt, r, _ = env.step(s, (1, 0), SeededRng(1))
    assert nxt.state_id == int(np.argmax(m.P[s.state_id, m.joint_index((1, 0))]))
    assert r == m.R[s.state_id, m.joint_index((1, 0))]


def test_tabular_successor_frequencies_within_3_sigma():
    m = random_decmdp(7, 2, 3, 2)
    env = TabularEnv(m, horizon=1)
    rng = SeededRng(9)
    start = env._state(0, 0)
    trials = 100_000
    counts = np.zeros(3)
    for _ in range(trials):
        nxt, _, _ = env.step(start, (1, 1), rng)
        counts[nxt.state_id] += 1
    p = m.P[0, m.joint_index((1, 1))]
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) <= 3 * sigma)
