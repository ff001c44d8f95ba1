import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from plcql.ensemble import QEnsemble
from plcql.nn import Optimizer, SeededRng, softmax
from plcql.par_policy import (Baseline, ParPolicy, baseline_update, clipped_surrogate, par_reward, ppo_update,
                              rewards_from_values, surrogate_logit_grad, uncertainty_weight)


def test_zero_net_uniform_sampling():
    par = ParPolicy(2, 4, zero=True)
    rng = SeededRng(0)
    counts = np.zeros(4)
    for _ in range(10_000):
        k, _ = par.sample_k([0.1, 0.2], rng)
        counts[k - 1] += 1
    assert np.abs(counts / 10_000 - 0.25).max() <= 0.02


def test_extreme_logits_pick_k1():
    par = ParPolicy(1, 2, hidden=(), zero=True)
    par.net.biases[0][:] = [10.0, -10.0]
    assert par.probs([0.0])[0] > 0.9999


def test_log_prob_consistent():
    par = ParPolicy(3, 3, rng=SeededRng(1))
    rng = SeededRng(2)
    s = rng.normal(size=3)
    for _ in range(50):
        k, lp = par.sample_k(s, rng)
        assert 1 <= k <= 3
        assert lp == pytest.approx(math.log(par.probs(s)[k - 1]), abs=1e-12)


def test_sample_k_frequencies_within_3_sigma():
    par = ParPolicy(2, 3, rng=SeededRng(4))
    s = np.array([[0.5, -0.3]] * 100_000)
    ks, _ = par.sample_k_batch(s, SeededRng(5))
    p = par.probs(s[0])
    counts = np.bincount(ks - 1, minlength=3)
    sigma = np.sqrt(100_000 * p * (1 - p))
    assert np.all(np.abs(counts - 100_000 * p) <= 3 * sigma)


def test_sample_k_dimension_mismatch():
    with pytest.raises(ValueError):
        ParPolicy(2, 3, zero=True).sample_k([1.0, 2.0, 3.0], SeededRng(0))


def test_weight_examples():
    assert uncertainty_weight(0.0, 1.0) == 1.0
    assert abs(uncertainty_weight(1.0, 1.0) - (1 / (1 + math.e) + 0.5)) <= 1e-12
    assert uncertainty_weight(1.0, 1.0) == pytest.approx(0.76894, abs=1e-5)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 50), st.floats(0.01, 10), st.floats(0.01, 5))
def test_weight_range_and_monotonicity(u, t, du):
    # beyond u*T ~ 37 the logistic term drops below float64 resolution at 0.5
    assume((u + du) * (t + du) <= 30)
    w = uncertainty_weight(u, t)
    assert 0.5 < w <= 1.0
    assert uncertainty_weight(u + du, t) < w
    assert uncertainty_weight(u, t + du) < w


def test_par_reward_examples():
    ens = QEnsemble(1, (2,), size=2, zero=True)
    r = par_reward(ens, [0.0], (1,), 1.0)
    assert r.w == 1.0 and r.r_par == 0.0 and r.u_q == 0.0
    ens.online[0].biases[-1][:] = 3.0
    ens.online[1].biases[-1][:] = 1.0
    r = par_reward(ens, [0.0], (1,), 1.0)
    assert r.u_q == 1.0 and r.r_par == pytest.approx(3.0 * (1 / (1 + math.e) + 0.5), abs=1e-12)


def test_unweighted_rewards():
    w, u, r = rewards_from_values(np.array([[2.0], [4.0]]), 1.0, weighted=False)
    assert w[0] == 1.0 and u[0] == 1.0 and r[0] == 2.0


def test_baseline_examples():
    b = Baseline(1, hidden=(), zero=True)
    b.optimizer = Optimizer(0.1, "sgd")
    assert baseline_update(b, [[1.0]], [2.0]) == 4.0
    b = Baseline(1, hidden=(), zero=True)
    b.optimizer = Optimizer(0.1, "sgd")
    before = b.net.flat_params()
    assert baseline_update(b, [[1.0], [2.0]], [0.0, 0.0]) == 0.0
    np.testing.assert_array_equal(b.net.flat_params(), before)
    with pytest.raises(ValueError):
        baseline_update(b, np.zeros((0, 1)), [])


def test_baseline_loss_non_increasing():
    b = Baseline(2, hidden=(8,), rng=SeededRng(3))
    b.optimizer = Optimizer(0.01, "sgd")
    rng = SeededRng(4)
    s, r = rng.normal(size=(16, 2)), rng.normal(size=16)
    losses = [baseline_update(b, s, r) for _ in range(100)]
    assert all(b_ <= a_ + 1e-12 for a_, b_ in zip(losses, losses[1:]))


def test_forced_surrogate_examples():
    assert clipped_surrogate(2.0, 1.0, 0.2) == 1.2
    assert clipped_surrogate(0.5, -1.0, 0.2) == -0.8
    adv = np.array([0.3, -1.5, 2.0])
    np.testing.assert_array_equal(clipped_surrogate(np.ones(3), adv, 0.2), adv)


def _surrogate_fd(logits, k_idx, old, adv, eps, h=1e-6):
    g = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += h
        lm[idx] -= h
        g[idx] = (surrogate_logit_grad(lp, k_idx, old, adv, eps)[0].sum()
                  - surrogate_logit_grad(lm, k_idx, old, adv, eps)[0].sum()) / (2 * h)
    return g


def test_zero_gradient_outside_clip_band():
    logits = np.array([[2.0, 0.0, -1.0]])
    p = softmax(logits[0])
    old = np.array([math.log(p[0] / 1.5)])  # ratio 1.5 > 1 + eps
    _, grad = surrogate_logit_grad(logits, np.array([0]), old, np.array([1.0]), 0.2)
    np.testing.assert_array_equal(grad, 0.0)
    np.testing.assert_allclose(_surrogate_fd(logits, np.array([0]), old, np.array([1.0]), 0.2), 0.0, atol=1e-9)


def test_surrogate_gradient_matches_fd_inside_band():
    rng = SeededRng(0)
    logits = rng.normal(size=(4, 3))
    k_idx = np.array([0, 2, 1, 1])
    old = np.log(softmax(logits))[np.arange(4), k_idx] + rng.uniform(-0.1, 0.1, size=4)
    adv = rng.normal(size=4)
    _, grad = surrogate_logit_grad(logits, k_idx, old, adv, 0.2)
    np.testing.assert_allclose(grad, _surrogate_fd(logits, k_idx, old, adv, 0.2), atol=1e-7)


def test_ppo_first_epoch_ratio_one_and_snapshot_refresh():
    par = ParPolicy(2, 3, rng=SeededRng(1), lr=1e-2)
    s = SeededRng(2).normal(size=(6, 2))
    ks, logp = par.sample_k_batch(s, SeededRng(3))
    np.testing.assert_allclose(par.log_probs(s, old=True)[np.arange(6), ks - 1], logp, atol=1e-14)
    ppo_update(par, np.zeros(6), s, ks, logp, SeededRng(4).normal(size=6))
    np.testing.assert_array_equal(par.old_net.flat_params(), par.net.flat_params())


def test_ppo_errors():
    par = ParPolicy(1, 2, zero=True)
    with pytest.raises(ValueError):
        ppo_update(par, np.zeros(0), np.zeros((0, 1)), [], [], [])
    with pytest.raises(FloatingPointError):
        ppo_update(par, np.zeros(1), [[0.0]], [1], [math.log(0.5)], [np.nan])


def run_bandit(n=3, updates=500, batch=32, seed=0):
    """Context A rewards small k, context B rewards large k."""
    table = {0: np.linspace(1.0, 0.0, n), 1: np.linspace(0.0, 1.0, n)}
    contexts = np.array([[1.0, 0.0], [0.0, 1.0]])
    par = ParPolicy(2, n, rng=SeededRng(seed), lr=3e-3)
    base = Baseline(2, rng=SeededRng(seed + 1), lr=1e-2)
    rng = SeededRng(seed + 2)
    for _ in range(updates):
        ctx = rng.integers(0, 2, size=batch)
        s = contexts[ctx]
        ks, logp = par.sample_k_batch(s, rng)
        r = np.array([table[c][k - 1] for c, k in zip(ctx, ks)])
        frozen = base.value(s)
        baseline_update(base, s, r)
        ppo_update(par, frozen, s, ks, logp, r)
    return par.probs(contexts[0])[0], par.probs(contexts[1])[n - 1]


def test_bandit_sanity():
    a, b = run_bandit()
    assert a >= 0.8 and b >= 0.8
