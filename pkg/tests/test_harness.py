import math

import numpy as np
import pytest

from robustpref.data import flip_pairs, sample_pairs
from robustpref.env import random_env, tabular_env
from robustpref.harness import (
    ALL_COLUMNS,
    COLUMNS,
    Method,
    SweepConfig,
    flip_seed,
    format_row,
    loglog_slope,
    read_rows,
    run_cell,
    run_sweep,
    slope_from_rows,
    tune_eps,
    write_rows,
)

GRID = (0.0, 0.1, 0.2, 0.3, 0.4)


def tuning_env():
    # strongly saturated rewards: flips bend the vanilla estimate enough to
    # reorder actions, so holdout accuracy can tell the flip rates apart
    return random_env(4, 6, 6, seed=14, reward_scale=40.0, sft_scale=0.5)


class TestTuneEps:
    def test_singleton(self, small_env):
        tr = flip_pairs(sample_pairs(small_env, 500, 0), 0.3, 1)
        best, scores = tune_eps(tr, sample_pairs(small_env, 500, 7), small_env, [0.3])
        assert best == 0.3 and set(scores) == {0.3}

    def test_ties_pick_smallest(self):
        # tabular ladder: every flip rate learns the same action ordering
        env = tabular_env([np.linspace(-1.5, 1.5, 8)])
        tr = flip_pairs(sample_pairs(env, 4096, 0), 0.4, 1)
        best, scores = tune_eps(tr, sample_pairs(env, 2000, 9), env, [0.3, 0.1, 0.2])
        assert len(set(scores.values())) == 1
        assert best == 0.1

    def test_empty_grid(self, small_env):
        ds = sample_pairs(small_env, 10, 0)
        with pytest.raises(ValueError):
            tune_eps(ds, sample_pairs(small_env, 10, 1), small_env, [])

    def test_holdout_distinct(self, small_env):
        ds = sample_pairs(small_env, 50, 0)
        with pytest.raises(ValueError):
            tune_eps(ds, ds, small_env, GRID)
        with pytest.raises(ValueError):
            tune_eps(ds, sample_pairs(small_env, 50, 0), small_env, GRID)

    @pytest.mark.slow
    def test_selects_large_eps(self):
        env = tuning_env()
        picks = []
        for seed in range(20):
            tr = flip_pairs(sample_pairs(env, 8192, seed), 0.4, flip_seed(seed))
            ho = sample_pairs(env, 8192, 10_000 + seed)
            picks.append(tune_eps(tr, ho, env, GRID)[0])
        assert np.mean(np.array(picks) >= 0.2) >= 0.8


class TestSlope:
    def test_exact_power(self):
        n = np.array([256, 1024, 4096, 16384] * 3, dtype=float)
        res = loglog_slope(n, 3.0 * n ** -0.5, seeds=np.repeat([0, 1, 2], 4))
        assert abs(res.slope + 0.5) < 1e-10
        assert abs(res.ci_low + 0.5) < 1e-10 and abs(res.ci_high + 0.5) < 1e-10
        assert abs(math.exp(res.intercept) - 3.0) < 1e-9

    def test_constant(self):
        res = loglog_slope([1, 2, 4, 8], [0.7] * 4)
        assert abs(res.slope) < 1e-12

    def test_median_per_x(self):
        x = [10, 10, 10, 100, 100, 100, 1000, 1000, 1000]
        y = [1.0, 5.0, 50.0, 0.1, 0.5, 5.0, 0.01, 0.05, 0.5]
        res = loglog_slope(x, y)
        np.testing.assert_allclose(res.median, [5.0, 0.5, 0.05])
        assert abs(res.slope + 1) < 1e-12

    def test_ci_brackets(self):
        gen = np.random.default_rng(0)
        n = np.repeat([256, 1024, 4096, 16384], 20).astype(float)
        seeds = np.tile(np.arange(20), 4)
        y = n ** -0.5 * np.exp(gen.normal(0, 0.3, n.size))
        res = loglog_slope(n, y, seeds)
        assert res.ci_low <= res.slope <= res.ci_high
        assert -0.65 < res.slope < -0.35

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            loglog_slope([1, 2, 1, 2], [1, 2, 3, 4])
        with pytest.raises(ValueError):
            loglog_slope([1, 2, 3], [1, 0, 3])


def small_sweep(**kw):
    base = dict(methods=(Method("rdpo"), Method("dpo")), eps_true=(0.2,), n=(128, 256),
                seeds=(0, 1), steps=200)
    base.update(kw)
    return SweepConfig(**base)


class TestSweep:
    def test_cells(self):
        cfg = small_sweep(eps_assumed=("true", 0.1))
        cells = cfg.cells()
        # rdpo runs eps_assumed in {0.1, 0.2}; dpo ignores it
        assert len(cells) == 2 * 2 * 2 + 1 * 2 * 2
        assert {c[2] for c in cells if c[0].family == "dpo"} == {0.0}

    def test_invalid(self):
        with pytest.raises(ValueError):
            small_sweep(eps_true=(0.5,))
        with pytest.raises(ValueError):
            small_sweep(seeds=())
        with pytest.raises(ValueError):
            SweepConfig.from_dict({"nope": 1})

    def test_from_dict(self):
        cfg = SweepConfig.from_dict({"env": "e.json", "methods": ["rdpo", {"family": "ipo"}],
                                     "n": [10, 20], "eps_true": [0.1]})
        assert cfg.env_path == "e.json"
        assert [m.label for m in cfg.methods] == ["rdpo", "ipo"]

    def test_columns(self, small_env):
        row = run_cell(small_env, Method("rdpo"), 0.2, 0.2, 128, 0, small_sweep())
        assert list(ALL_COLUMNS[:len(COLUMNS)]) == list(COLUMNS)
        assert set(row) == set(ALL_COLUMNS)
        assert row["wall_ms"] == 0.0 and row["env_hash"] == small_env.fingerprint()

    def test_row_reproducible(self, small_env):
        cfg = small_sweep()
        a = run_cell(small_env, Method("rdpo"), 0.2, 0.2, 256, 1, cfg)
        b = run_cell(small_env, Method("rdpo"), 0.2, 0.2, 256, 1, cfg)
        assert format_row(a) == format_row(b)

    def test_parallel_matches_serial(self, small_env):
        cfg = small_sweep()
        serial = run_sweep(cfg, small_env, workers=1)
        parallel = run_sweep(cfg, small_env, workers=2)
        assert [format_row(r) for r in serial] == [format_row(r) for r in parallel]

    def test_csv_roundtrip(self, tmp_path, small_env):
        rows = run_sweep(small_sweep(n=(64, 128, 256)), small_env)
        path = tmp_path / "out.csv"
        write_rows(rows[:3], path)
        write_rows(rows[3:], path, append=True)
        back = read_rows(path)
        assert len(back) == len(rows)
        assert list(back[0]) == list(ALL_COLUMNS)
        assert all(float(b["l2_error"]) == r["l2_error"] for b, r in zip(back, rows))
        res = slope_from_rows(back, method="rdpo", n_boot=50)
        assert len(res.x) == 3
        with pytest.raises(ValueError):
            slope_from_rows(back, n_boot=10)
