import json
import math

import mpmath
import numpy as np
import pytest

from robustpref.env import (
    DiscreteEnv,
    PolicyParams,
    implicit_reward,
    linear_score,
    load_env,
    optimal_policy,
    policy_log_probs,
    predicted_pref_prob,
    preference_score,
    random_env,
    save_env,
    tabular_env,
    true_pref_prob,
)
from robustpref.errors import DegeneratePairError, EnvValidationError, NumericRangeError

from conftest import zero_sum

mpmath.mp.dps = 40


def two_action_env(score_gap, beta=1.0):
    phi = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    return DiscreteEnv([1.0], phi, latent_reward=[[score_gap, 0.0]], beta=beta)


class TestPolicy:
    def test_uniform_at_zero(self):
        env = tabular_env([[0.3, 0.1, -0.2]])
        np.testing.assert_allclose(policy_log_probs(env, np.zeros(3), 0), math.log(1 / 3),
                                   atol=1e-15)

    def test_three_to_one(self):
        env = two_action_env(0.0)
        theta = np.array([math.log(3) / 2, -math.log(3) / 2])
        np.testing.assert_allclose(np.exp(policy_log_probs(env, theta, 0)), [0.75, 0.25],
                                   atol=1e-15)

    def test_matches_extended_precision(self):
        gen = np.random.default_rng(0)
        env = random_env(1, 5, 4, seed=3)
        theta = zero_sum(gen, 4, 3.0)
        got = policy_log_probs(env, theta, 0)
        scores = [mpmath.mpf(float(v)) for v in env.features[0] @ theta]
        z = mpmath.fsum(mpmath.exp(v) for v in scores)
        want = [float(v - mpmath.log(z)) for v in scores]
        np.testing.assert_allclose(got, want, atol=1e-13)
        assert abs(np.exp(got).sum() - 1) < 1e-12

    def test_bad_prompt(self, small_env):
        with pytest.raises(IndexError):
            policy_log_probs(small_env, np.zeros(4), 7)


class TestScores:
    def test_implicit_reward_zero_at_sft(self, small_env):
        for s in range(3):
            for a in range(5):
                assert implicit_reward(small_env, small_env.theta_sft, s, a) == 0.0

    def test_implicit_reward_two_paths(self, small_env):
        gen = np.random.default_rng(1)
        from scipy.special import logsumexp
        for _ in range(50):
            theta = zero_sum(gen, 4, 2.0)
            s, a = int(gen.integers(3)), int(gen.integers(5))
            phi = small_env.features[s]
            direct = (theta - small_env.theta_sft) @ phi[a] - (
                logsumexp(phi @ theta) - logsumexp(phi @ small_env.theta_sft))
            assert abs(implicit_reward(small_env, theta, s, a) - direct) < 1e-12

    def test_implicit_reward_equal_scores(self):
        env = tabular_env([[1.0, 2.0, 3.0]])
        assert implicit_reward(env, np.zeros(3), 0, 2) == 0.0

    def test_preference_score_example(self):
        phi = np.array([[[0.5, 2.0], [0.0, 0.0]]])
        env = DiscreteEnv([1.0], phi, latent_reward=[[0.0, 0.0]])
        assert abs(preference_score(env, np.array([1.0, 0.0]), 0, 0, 1) - 0.5) < 1e-15

    def test_preference_score_antisymmetric_and_linear(self, small_env):
        gen = np.random.default_rng(2)
        for _ in range(1000):
            theta = zero_sum(gen, 4, 2.0)
            s = int(gen.integers(3))
            a, b = gen.choice(5, 2, replace=False)
            h = preference_score(small_env, theta, s, a, b)
            assert abs(h + preference_score(small_env, theta, s, b, a)) < 1e-14
            assert abs(h - linear_score(small_env, theta, s, a, b)) < 1e-12

    def test_degenerate_pair(self, small_env):
        with pytest.raises(DegeneratePairError):
            preference_score(small_env, np.zeros(4), 0, 1, 1)
        with pytest.raises(DegeneratePairError):
            true_pref_prob(small_env, 0, 2, 2)


class TestPreferences:
    def test_equal_rewards(self):
        for model in ("btl", "probit"):
            env = DiscreteEnv([1.0], np.eye(2)[None], latent_reward=[[0.4, 0.4]],
                              pref_model=model)
            assert true_pref_prob(env, 0, 0, 1) == 0.5

    def test_btl_ln3(self):
        assert abs(true_pref_prob(two_action_env(math.log(3)), 0, 0, 1) - 0.75) < 1e-15

    def test_probit_one(self):
        env = DiscreteEnv([1.0], np.eye(2)[None], latent_reward=[[1.0, 0.0]],
                          pref_model="probit")
        assert abs(true_pref_prob(env, 0, 0, 1) - float(mpmath.ncdf(1))) < 1e-15

    def test_pair_sums_to_one(self, small_env):
        assert abs(true_pref_prob(small_env, 1, 0, 3) + true_pref_prob(small_env, 1, 3, 0)
                   - 1) < 1e-15

    def test_predicted(self):
        env = two_action_env(0.0)
        assert predicted_pref_prob(env, np.zeros(2), 0, 0, 1) == 0.5
        theta = np.array([0.5, -0.5])     # h = 1
        want = float(1 / (1 + mpmath.exp(-1)))
        assert abs(predicted_pref_prob(env, theta, 0, 0, 1) - want) < 1e-15
        assert abs(predicted_pref_prob(env, theta, 0, 0, 1)
                   + predicted_pref_prob(env, theta, 0, 1, 0) - 1) < 1e-12

    def test_predicted_at_optimum(self, small_env):
        for s in range(3):
            for a in range(5):
                for b in range(5):
                    if a != b:
                        assert abs(predicted_pref_prob(small_env, small_env.theta_opt, s, a, b)
                                   - true_pref_prob(small_env, s, a, b)) < 1e-10


class TestOptimalPolicy:
    def test_constant_reward(self):
        env = tabular_env([[2.0, 2.0, 2.0]], theta_sft=[0.3, -0.1, -0.2])
        np.testing.assert_allclose(optimal_policy(env), env.sft_policy, atol=1e-15)

    def test_two_thirds(self):
        beta = 0.7
        env = tabular_env([[beta * math.log(2), 0.0]], beta=beta)
        np.testing.assert_allclose(optimal_policy(env), [[2 / 3, 1 / 3]], atol=1e-15)

    def test_reparameterization(self):
        for seed in range(5):
            env = random_env(2, 4, 3, seed=seed, beta=0.5 + seed)
            logp = np.log(optimal_policy(env))
            implicit = env.beta * (logp - env.sft_log_policy)
            r = env.latent_reward
            for s in range(2):
                for a in range(4):
                    for b in range(4):
                        if a != b:
                            lhs = 1 / (1 + math.exp(-(r[s, a] - r[s, b])))
                            rhs = 1 / (1 + math.exp(-(implicit[s, a] - implicit[s, b])))
                            assert abs(lhs - rhs) < 1e-12

    def test_rows_normalized_small_beta(self):
        env = random_env(2, 4, 3, seed=1, reward_scale=5.0, beta=1e-3)
        assert np.allclose(optimal_policy(env).sum(axis=1), 1, atol=1e-12)

    def test_overflow(self):
        env = tabular_env([[1e300, -1e300]], beta=1e-10)
        with pytest.raises(NumericRangeError):
            optimal_policy(env)

    def test_large_beta_approaches_sft(self, small_env):
        dists = []
        for beta in (1, 10, 100, 1000):
            env = DiscreteEnv(small_env.prompt_weights, small_env.features,
                              theta_star=small_env.theta_star,
                              theta_sft=small_env.theta_sft, beta=beta)
            dists.append(np.max(np.abs(optimal_policy(env) - env.sft_policy)))
        assert all(x > y for x, y in zip(dists, dists[1:]))


class TestValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(prompt_weights=[0.5, 0.6]),
        dict(prompt_weights=[1.2, -0.2]),
        dict(beta=0.0),
        dict(beta=float("inf")),
        dict(features=np.zeros((2, 1, 2))),
        dict(pref_model="thurstone"),
    ])
    def test_rejects(self, kwargs):
        base = dict(prompt_weights=[0.5, 0.5], features=np.ones((2, 3, 2)),
                    latent_reward=np.zeros((2, 3)))
        base.update(kwargs)
        if base["features"].shape[1] != 3:
            base["latent_reward"] = np.zeros((2, base["features"].shape[1]))
        with pytest.raises(EnvValidationError):
            DiscreteEnv(**base)

    def test_policy_params(self):
        PolicyParams(np.array([1.0, -1.0]), 2.0)
        with pytest.raises(ValueError):
            PolicyParams(np.array([1.0, 0.0]), 2.0)
        with pytest.raises(ValueError):
            PolicyParams(np.array([3.0, -3.0]), 2.0)

    def test_zero_sum_canonicalization(self):
        phi = np.eye(3)[None]
        env = DiscreteEnv([1.0], phi, theta_star=[3.0, 2.0, 1.0])
        np.testing.assert_allclose(env.theta_star, [1.0, 0.0, -1.0])


def test_file_round_trip(tmp_path, small_env):
    path = tmp_path / "env.json"
    h = save_env(small_env, path)
    back = load_env(path)
    assert back.fingerprint() == h == small_env.fingerprint()
    np.testing.assert_array_equal(back.features, small_env.features)


def test_load_theta_star_reward(tmp_path):
    obj = {"prompt_weights": [1.0], "features": [[[1, 0], [0, 1]]],
           "latent_reward": {"theta_star": [0.5, -0.5]}, "theta_sft": [0, 0],
           "beta": 2.0, "pref_model": "probit"}
    path = tmp_path / "e.json"
    path.write_text(json.dumps(obj))
    env = load_env(path)
    assert env.realizable and env.pref_model == "probit"
    np.testing.assert_allclose(env.latent_reward, [[0.5, -0.5]])


def test_load_reports_violation(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"prompt_weights": [0.3], "features": [[[1], [0]]],
                                "latent_reward": [[0, 1]], "beta": 1.0}))
    with pytest.raises(EnvValidationError, match="sum to 1"):
        load_env(path)
