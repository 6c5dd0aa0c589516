import itertools
import math

import numpy as np
import pytest

from robustpref import rng
from robustpref.data import (
    PreferenceDataset,
    all_rankings,
    flip_pairs,
    load_dataset,
    perturb_rankings,
    sample_pairs,
    sample_rankings,
    save_dataset,
)
from robustpref.env import DiscreteEnv, tabular_env, true_pref_table
from robustpref.errors import (
    DegenerateSFTError,
    InvalidRateError,
    KindMismatchError,
    ProvenanceError,
)
from robustpref.linalg import pair_law


def band(p, n, k=3.0):
    return k * math.sqrt(p * (1 - p) / n)


class TestRng:
    def test_uniform_moments(self):
        u = rng.uniforms(rng.record_keys(5, "pairs", np.arange(200000)), 0)
        assert abs(u.mean() - 0.5) < 3 * math.sqrt(1 / 12 / len(u))
        assert abs(u.var() - 1 / 12) < 1e-3
        assert u.min() >= 0 and u.max() < 1

    def test_records_are_independent_of_batch(self):
        keys = rng.record_keys(9, "flips", np.arange(100))
        part = rng.record_keys(9, "flips", np.arange(40, 60))
        np.testing.assert_array_equal(rng.uniforms(keys, 3)[40:60], rng.uniforms(part, 3))

    def test_streams_differ(self):
        a = rng.uniforms(rng.record_keys(1, "pairs", np.arange(10)), 0)
        b = rng.uniforms(rng.record_keys(1, "flips", np.arange(10)), 0)
        assert not np.allclose(a, b)

    def test_categorical_inverse_cdf(self):
        probs = np.tile([0.2, 0.5, 0.3], (4, 1))
        idx = rng.categorical(np.array([0.0, 0.19, 0.2, 0.99]), probs)
        np.testing.assert_array_equal(idx, [0, 0, 1, 2])


class TestSamplePairs:
    def test_deterministic_preference(self):
        env = tabular_env([[50.0, 0.0]])
        ds = sample_pairs(env, 1000, 3)
        assert np.all(ds.w == 0) and np.all(~ds.flip)

    def test_same_seed_same_bytes(self, tmp_path, small_env):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset(sample_pairs(small_env, 500, 4), a)
        save_dataset(sample_pairs(small_env, 500, 4), b)
        assert a.read_bytes() == b.read_bytes()

    def test_prefix_property(self, small_env):
        big = sample_pairs(small_env, 300, 8)
        assert big.head(120) == sample_pairs(small_env, 120, 8)

    def test_binomial_winner_rate(self):
        env = tabular_env([[math.log(3), 0.0]])
        ds = sample_pairs(env, 100000, 5)
        frac = np.mean(ds.w == 0)
        assert abs(frac - 0.75) < band(0.75, 100000)

    def test_pair_law(self, small_env):
        n = 200000
        ds = sample_pairs(small_env, n, 6)
        # unordered pair frequencies against the exact law
        P = pair_law(small_env)
        P = P + np.swapaxes(P, 1, 2)
        counts = np.zeros_like(P)
        np.add.at(counts, (ds.s, ds.w, ds.l), 1)
        counts = counts + np.swapaxes(counts, 1, 2)
        iu = np.triu_indices(5, 1)
        for s in range(3):
            p = P[s][iu]
            f = counts[s][iu] / n
            assert np.all(np.abs(f - p) < 4 * np.sqrt(p * (1 - p) / n) + 1e-12)

    def test_degenerate_sft(self):
        phi = np.eye(3)[None]
        env = DiscreteEnv([1.0], phi, latent_reward=[[0, 0, 0]], theta_sft=[800.0, 0, -800.0])
        with pytest.raises(DegenerateSFTError):
            sample_pairs(env, 10, 0)

    def test_min_reward_gap(self, ladder_env):
        ds = sample_pairs(ladder_env, 2000, 1, min_reward_gap=1.0)
        r = ladder_env.latent_reward[0]
        assert np.all(np.abs(r[ds.w] - r[ds.l]) > 1.0)

    def test_n_positive(self, small_env):
        with pytest.raises(ValueError):
            sample_pairs(small_env, 0, 1)


class TestFlips:
    def test_eps_zero_identity(self, small_env):
        ds = sample_pairs(small_env, 1000, 1)
        assert flip_pairs(ds, 0.0, 2) == ds

    def test_flip_rate(self, small_env):
        ds = flip_pairs(sample_pairs(small_env, 100000, 1), 0.3, 2)
        assert abs(ds.flip.mean() - 0.3) < band(0.3, 100000)
        assert ds.eps_true == 0.3
        np.testing.assert_array_equal(ds.cw, sample_pairs(small_env, 100000, 1).cw)

    def test_double_flip_is_xor(self, small_env):
        clean = sample_pairs(small_env, 1000, 1)
        one = flip_pairs(clean, 0.4, 2)
        two = flip_pairs(one, 0.4, 3)
        f1 = flip_pairs(clean, 0.4, 2).flip
        f2 = flip_pairs(clean, 0.4, 3).flip
        np.testing.assert_array_equal(two.flip, f1 ^ f2)
        assert abs(two.eps_true - 2 * 0.4 * 0.6) < 1e-15

    def test_nested_across_rates(self, small_env):
        clean = sample_pairs(small_env, 5000, 1)
        lo, hi = flip_pairs(clean, 0.1, 7).flip, flip_pairs(clean, 0.3, 7).flip
        assert np.all(hi[lo])

    @pytest.mark.parametrize("eps", [-0.1, 0.5, 0.6])
    def test_invalid_rate(self, small_env, eps):
        with pytest.raises(InvalidRateError):
            flip_pairs(sample_pairs(small_env, 10, 1), eps, 2)

    def test_records_consistent(self, small_env):
        ds = flip_pairs(sample_pairs(small_env, 300, 1), 0.3, 2)
        for rec in ds.records():
            assert rec.obs_winner != rec.obs_loser
            assert {rec.obs_winner, rec.obs_loser} == {rec.clean_winner, rec.clean_loser}
            assert rec.flipped == (rec.obs_winner != rec.clean_winner)

    def test_rankings_rejected(self, small_env):
        with pytest.raises(KindMismatchError):
            flip_pairs(sample_rankings(small_env, 10, 3, 0), 0.1, 1)


class TestRankings:
    def test_eps_zero(self, small_env):
        ds = perturb_rankings(sample_rankings(small_env, 500, 3, 1), 0.0, 2)
        np.testing.assert_array_equal(ds.rank, ds.crank)

    def test_uniform_six(self):
        env = tabular_env([[0.0, 0.0, 0.0]])
        n = 60000
        ds = sample_rankings(env, n, 3, 4)
        counts = {}
        for row in map(tuple, ds.rank):
            counts[row] = counts.get(row, 0) + 1
        assert len(counts) == 6
        for c in counts.values():
            assert abs(c / n - 1 / 6) < band(1 / 6, n)

    def test_plackett_luce_law(self):
        r = np.array([1.0, 0.0, -0.5])
        env = tabular_env([r])
        n = 60000
        ds = sample_rankings(env, n, 3, 5)
        w = np.exp(r)
        for perm in itertools.permutations(range(3)):
            p = w[perm[0]] / w.sum() * w[perm[1]] / (w[perm[1]] + w[perm[2]])
            f = np.mean(np.all(ds.rank == perm, axis=1))
            assert abs(f - p) < band(p, n)

    def test_k2_matches_pair_semantics(self, small_env):
        n = 100000
        eps = 0.2
        ranks = perturb_rankings(sample_rankings(small_env, n, 2, 1), eps, 2)
        pairs = flip_pairs(sample_pairs(small_env, n, 1), eps, 2)
        law = pair_law(small_env)
        # either draw order can produce the unordered pair
        P = (law + np.swapaxes(law, 1, 2)) * true_pref_table(small_env)
        P_obs = (1 - eps) * P + eps * np.swapaxes(P, 1, 2)
        for s in range(3):
            for a in range(5):
                for b in range(5):
                    if a == b:
                        continue
                    p = P_obs[s, a, b]
                    fr = np.mean((ranks.s == s) & (ranks.rank[:, 0] == a) & (ranks.rank[:, 1] == b))
                    fp = np.mean((pairs.s == s) & (pairs.w == a) & (pairs.l == b))
                    assert abs(fr - p) < band(p, n) + 1e-12
                    assert abs(fp - p) < band(p, n) + 1e-12
        assert ranks.candidate_count == 2

    def test_perturbation_law(self, small_env):
        n = 60000
        eps = 0.5
        ds = perturb_rankings(sample_rankings(small_env, n, 3, 1), eps, 2)
        moved = np.any(ds.rank != ds.crank, axis=1)
        assert abs(moved.mean() - eps) < band(eps, n)
        # each alternative equally likely
        perms = list(itertools.permutations(range(3)))[1:]
        for perm in perms:
            f = np.mean(np.all(ds.rank == ds.crank[:, perm], axis=1))
            assert abs(f - eps / 5) < band(eps / 5, n)

    def test_rate_guard(self, small_env):
        ds = sample_rankings(small_env, 10, 3, 1)
        perturb_rankings(ds, 0.8, 2)           # (1 - 0.8) 6 - 1 = 0.2 > 0
        with pytest.raises(InvalidRateError):
            perturb_rankings(ds, 5 / 6, 2)

    def test_bad_k(self, small_env):
        with pytest.raises(ValueError):
            sample_rankings(small_env, 10, 6, 1)
        with pytest.raises(ValueError):
            sample_rankings(small_env, 10, 1, 1)

    def test_all_rankings(self):
        assert len(all_rankings([4, 1, 2])) == 6


class TestPersistence:
    def test_round_trip_pairs(self, tmp_path, small_env):
        ds = flip_pairs(sample_pairs(small_env, 200, 1), 0.25, 2)
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        assert load_dataset(path, small_env) == ds

    def test_round_trip_rankings(self, tmp_path, small_env):
        ds = perturb_rankings(sample_rankings(small_env, 200, 4, 1), 0.3, 2)
        path = tmp_path / "r.jsonl"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back == ds and back.K == 4

    def test_provenance(self, tmp_path, small_env, ladder_env):
        path = tmp_path / "d.jsonl"
        save_dataset(sample_pairs(small_env, 5, 1), path)
        with pytest.raises(ProvenanceError):
            load_dataset(path, ladder_env)

    def test_schema(self, tmp_path, small_env):
        import json
        path = tmp_path / "d.jsonl"
        save_dataset(flip_pairs(sample_pairs(small_env, 3, 1), 0.2, 2), path)
        lines = [json.loads(x) for x in path.read_text().splitlines()]
        assert set(lines[0]) == {"env_hash", "seed", "eps_true", "kind"}
        assert all(set(x) == {"s", "w", "l", "cw", "flip"} for x in lines[1:])


class TestRedaction:
    def test_observed_view_hides_diagnostics(self, small_env):
        ds = flip_pairs(sample_pairs(small_env, 10, 1), 0.3, 2)
        obs = ds.observed()
        assert not hasattr(obs, "cw") and not hasattr(obs, "flip")
        rec = obs[0]
        assert not hasattr(rec, "clean_winner")

    def test_dataset_rejects_inconsistent_flags(self):
        with pytest.raises(ValueError):
            PreferenceDataset("pair", "x", 0, 0.1, s=[0], w=[0], l=[1], cw=[0], flip=[True])
