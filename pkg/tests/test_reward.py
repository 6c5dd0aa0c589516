import math

import numpy as np
import pytest

from robustpref.data import flip_pairs, sample_pairs, sample_rankings
from robustpref.env import optimal_policy, tabular_env
from robustpref.errors import KindMismatchError, ProvenanceError
from robustpref.harness import flip_seed
from robustpref.losses import LossSpec
from robustpref.metrics import subopt_gap
from robustpref.optim import TrainConfig, project
from robustpref.reward import (
    RewardParams,
    angle,
    load_reward,
    policy_from_reward,
    reward_pair_loss,
    reward_table,
    save_reward,
    train_reward,
)

from conftest import zero_sum

ANGLE_REWARDS = [-8.0, 0.0, 0.5, 1.0]


def centred(r):
    r = np.asarray(r, dtype=float)
    return r - r.mean()


def reward_fit(env, ds, eps, steps=None):
    spec = LossSpec("rdpo", eps=eps) if eps else LossSpec("dpo")
    xi, _ = train_reward(ds, env, TrainConfig(loss=spec, steps=steps))
    return xi


class TestPairLoss:
    def test_zero_difference(self, small_env):
        pair = sample_pairs(small_env, 1, 0).observed()[0]
        loss, grad = reward_pair_loss(np.zeros(4), small_env, pair)
        assert abs(loss - math.log(2)) < 1e-15
        loss_r, _ = reward_pair_loss(np.zeros(4), small_env, pair, eps=0.3)
        assert abs(loss_r - math.log(2)) < 1e-15

    def test_eps_zero(self, small_env):
        gen = np.random.default_rng(0)
        for pair in sample_pairs(small_env, 20, 1).observed():
            xi = zero_sum(gen, 4)
            a, b = reward_pair_loss(xi, small_env, pair), reward_pair_loss(xi, small_env, pair, 0.0)
            assert a[0] == b[0] and np.array_equal(a[1], b[1])

    def test_unbiased(self, small_env):
        gen = np.random.default_rng(1)
        for rec in sample_pairs(small_env, 30, 2).observed():
            xi = zero_sum(gen, 4, 3.0)
            eps = float(gen.uniform(0, 0.49))
            swapped = type(rec)(rec.prompt, rec.loser, rec.winner)
            kept, _ = reward_pair_loss(xi, small_env, rec, eps)
            flipped, _ = reward_pair_loss(xi, small_env, swapped, eps)
            clean, _ = reward_pair_loss(xi, small_env, rec)
            assert abs((1 - eps) * kept + eps * flipped - clean) < 1e-12

    def test_gradient_fd(self, small_env):
        gen = np.random.default_rng(2)
        pair = sample_pairs(small_env, 1, 3).observed()[0]
        xi = zero_sum(gen, 4)
        _, g = reward_pair_loss(xi, small_env, pair, 0.2)
        h = 1e-6
        fd = np.array([(reward_pair_loss(xi + h * e, small_env, pair, 0.2)[0]
                        - reward_pair_loss(xi - h * e, small_env, pair, 0.2)[0]) / (2 * h)
                       for e in np.eye(4)])
        np.testing.assert_allclose(g, fd, atol=1e-8)

    def test_bad_eps(self, small_env):
        pair = sample_pairs(small_env, 1, 0).observed()[0]
        with pytest.raises(ValueError):
            reward_pair_loss(np.zeros(4), small_env, pair, 0.5)


class TestTraining:
    def test_zero_steps(self, small_env):
        ds = sample_pairs(small_env, 50, 0)
        init = (3.0, -1.0, 14.0, 2.0)
        xi, _ = train_reward(ds, small_env, TrainConfig(steps=0, init=init))
        np.testing.assert_allclose(xi.xi, project(init, 10).theta)
        assert isinstance(xi, RewardParams)

    def test_grid_oracle(self):
        env = tabular_env([[1.0, -1.0]])
        ds = sample_pairs(env, 400, 5)
        xi = reward_fit(env, ds, 0.0).xi
        # zero-sum in d = 2: xi = (t, -t); scan t
        wins = float(np.mean(ds.w == 0))
        ts = np.linspace(-3, 3, 600001)
        loss = wins * np.logaddexp(0, -2 * ts) + (1 - wins) * np.logaddexp(0, 2 * ts)
        t = ts[np.argmin(loss)]
        assert abs(xi[0] - t) < 1e-5 and abs(xi[0] + xi[1]) < 1e-12
        # closed form: sigma(2t) = win rate
        assert abs(xi[0] - 0.5 * math.log(wins / (1 - wins))) < 1e-6

    def test_deterministic(self, small_env):
        ds = flip_pairs(sample_pairs(small_env, 300, 1), 0.2, 2)
        a, b = reward_fit(small_env, ds, 0.2), reward_fit(small_env, ds, 0.2)
        assert np.array_equal(a.xi, b.xi)

    def test_rankings_rejected(self, small_env):
        with pytest.raises(KindMismatchError):
            train_reward(sample_rankings(small_env, 10, 3, 0), small_env, TrainConfig())

    def test_angle_robust_beats_vanilla(self):
        env = tabular_env([ANGLE_REWARDS])
        truth = centred(ANGLE_REWARDS)
        robust, vanilla = [], []
        for seed in range(20):
            ds = flip_pairs(sample_pairs(env, 16384, seed), 0.4, flip_seed(seed))
            robust.append(angle(reward_fit(env, ds, 0.4).xi, truth))
            vanilla.append(angle(reward_fit(env, ds, 0.0).xi, truth))
        assert np.median(robust) < np.median(vanilla)


class TestPolicyFromReward:
    def test_zero_is_sft(self, small_env):
        np.testing.assert_allclose(policy_from_reward(small_env, np.zeros(4)),
                                   small_env.sft_policy, atol=1e-15)

    def test_truth_is_optimal(self):
        env = tabular_env([ANGLE_REWARDS, [0.3, -0.2, 0.1, 0.0]], beta=0.7)
        # tabular features are one-hot over (s, a), so the flattened table realizes r*
        xi = env.latent_reward.ravel()
        np.testing.assert_allclose(policy_from_reward(env, xi), optimal_policy(env), atol=1e-12)

    def test_rows_sum_to_one(self, small_env):
        gen = np.random.default_rng(3)
        for _ in range(20):
            pi = policy_from_reward(small_env, zero_sum(gen, 4, 50.0), beta=0.01)
            np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(np.isfinite(pi))

    def test_bad_beta(self, small_env):
        with pytest.raises(ValueError):
            policy_from_reward(small_env, np.zeros(4), beta=0.0)

    def test_reward_table(self, small_env):
        xi = np.array([1.0, 0.0, -1.0, 0.0])
        np.testing.assert_allclose(reward_table(small_env, xi), small_env.features @ xi)


@pytest.mark.slow
def test_pipeline_gap_shrinks(ladder_env):
    meds = []
    for n in (1024, 4096, 16384):
        # the raw gap can dip below zero near pi*, so compare its magnitude
        gaps = [abs(subopt_gap(ladder_env, policy_from_reward(
            ladder_env, reward_fit(ladder_env, sample_pairs(ladder_env, n, seed), 0.0).xi)))
            for seed in range(10)]
        meds.append(np.median(gaps))
    assert meds[0] > meds[1] > meds[2]


def test_save_load(tmp_path, small_env, ladder_env):
    xi = RewardParams(np.array([0.5, -0.5, 1.0, -1.0]), 10.0)
    save_reward(xi, small_env, tmp_path / "r.json")
    back = load_reward(tmp_path / "r.json", small_env)
    assert np.array_equal(back.xi, xi.xi) and back.bound_B == 10.0
    with pytest.raises(ProvenanceError):
        load_reward(tmp_path / "r.json", ladder_env)
