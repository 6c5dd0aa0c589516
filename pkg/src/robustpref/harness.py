"""Experiment plumbing: flip-rate tuning, parameter sweeps and log-log slopes.

Every sweep cell is a pure function of ``(env, method, eps_true,
eps_assumed, n, seed)`` and the shared training settings.  The pair data of
a cell comes from the ``seed`` substream and its flips from a derived
substream, so cells that differ only in ``n`` see nested datasets and cells
that differ only in ``eps_true`` see nested flips.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng
from .data import (
    PreferenceDataset,
    flip_pairs,
    perturb_rankings,
    sample_pairs,
    sample_rankings,
)
from .env import DiscreteEnv
from .losses import LossSpec
from .metrics import eval_accuracy, evaluate
from .optim import ConstantLR, TrainConfig, train

COLUMNS = ("method", "family", "link", "eps_true", "eps_assumed", "n", "seed",
           "l2_error", "seminorm_error", "lambda", "subopt_gap", "margin_gap",
           "eval_accuracy", "kappa_rel_bound", "gamma", "wall_ms")
EXTRA_COLUMNS = ("env_hash", "config_digest")
ALL_COLUMNS = COLUMNS + EXTRA_COLUMNS


def flip_seed(seed: int) -> int:
    return rng.derive_seed(seed, 1)


def cell_data(env: DiscreteEnv, spec: LossSpec, eps_true: float, n: int, seed: int,
              K: int = 3) -> PreferenceDataset:
    """The noisy training set of one sweep cell."""
    if spec.ranking:
        return perturb_rankings(sample_rankings(env, n, K, seed), eps_true, flip_seed(seed))
    return flip_pairs(sample_pairs(env, n, seed), eps_true, flip_seed(seed))


# -- flip-rate tuning -----------------------------------------------------------

def tune_eps(train_ds: PreferenceDataset, holdout: PreferenceDataset, env: DiscreteEnv,
             eps_grid: Sequence[float], base: Optional[TrainConfig] = None):
    """Pick the assumed flip rate that maximizes clean holdout accuracy.

    rDPO is trained once per grid value (plain DPO at ``eps = 0``).  Ties go
    to the smallest ``eps``.  Returns ``(best_eps, {eps: accuracy})``.
    """
    grid = sorted(float(e) for e in eps_grid)
    if not grid:
        raise ValueError("eps grid is empty")
    if holdout is train_ds or holdout == train_ds:
        raise ValueError("the holdout set must be distinct from the training set")
    base = base or TrainConfig()
    scores = {}
    for eps in grid:
        spec = LossSpec("rdpo", base.loss.link, eps)
        cfg = TrainConfig(loss=spec, bound_B=base.bound_B, steps=base.steps, lr=base.lr,
                          tol=base.tol, seed=base.seed)
        theta, _ = train(train_ds, env, cfg)
        scores[eps] = eval_accuracy(theta, env, holdout)
    best = max(scores.values())
    return next(e for e in grid if scores[e] == best), scores


# -- sweeps -----------------------------------------------------------------------

@dataclass(frozen=True)
class Method:
    family: str
    link: str = "logistic"
    name: Optional[str] = None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return self.family if self.link == "logistic" else f"{self.family}-{self.link}"

    def takes_eps(self) -> bool:
        return LossSpec(self.family, self.link).robust or self.family == "cdpo"


@dataclass(frozen=True)
class SweepConfig:
    """Grid of sweep cells plus shared training settings.

    ``eps_assumed`` entries may be the string ``"true"`` to match each cell's
    ``eps_true``.  Families without a flip rate ignore ``eps_assumed`` and
    run once with 0.
    """

    env_path: Optional[str] = None
    methods: tuple = (Method("rdpo"),)
    eps_true: tuple = (0.0,)
    eps_assumed: tuple = ("true",)
    n: tuple = (1024,)
    seeds: tuple = (0,)
    lam: Optional[float] = None
    bound_B: float = 10.0
    steps: Optional[int] = None
    tol: float = 1e-10
    K: int = 3
    test_n: int = 0
    timing: bool = False
    output: Optional[str] = None

    def __post_init__(self):
        methods = tuple(m if isinstance(m, Method) else Method(**m) if isinstance(m, dict)
                        else Method(m) for m in self.methods)
        object.__setattr__(self, "methods", methods)
        for name in ("eps_true", "eps_assumed", "n", "seeds"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"grid {name!r} is empty")
            object.__setattr__(self, name, vals)
        if not methods:
            raise ValueError("grid 'methods' is empty")
        for e in self.eps_true + tuple(e for e in self.eps_assumed if e != "true"):
            if not (0.0 <= float(e) < 0.5):
                raise ValueError(f"flip rates must lie in [0, 0.5), got {e}")
        if any(int(n) < 1 for n in self.n):
            raise ValueError("sample sizes must be positive")

    @classmethod
    def from_dict(cls, obj: dict) -> "SweepConfig":
        keys = cls.__dataclass_fields__
        unknown = set(obj) - set(keys) - {"env"}
        if unknown:
            raise ValueError(f"unknown sweep keys {sorted(unknown)}")
        obj = dict(obj)
        if "env" in obj:
            obj["env_path"] = obj.pop("env")
        return cls(**obj)

    def cells(self):
        out = []
        for m in self.methods:
            for et in self.eps_true:
                assumed = [0.0] if not m.takes_eps() else \
                    sorted({float(et) if ea == "true" else float(ea) for ea in self.eps_assumed})
                for ea in assumed:
                    for n in self.n:
                        for seed in self.seeds:
                            out.append((m, float(et), ea, int(n), int(seed)))
        return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_digest(obj: dict) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_cell(env: DiscreteEnv, method: Method, eps_true: float, eps_assumed: float, n: int,
             seed: int, cfg: SweepConfig) -> dict:
    """Generate data, train and evaluate one cell; returns a CSV row dict."""
    spec = LossSpec(method.family, method.link, eps_assumed)
    t0 = time.perf_counter()
    ds = cell_data(env, spec, eps_true, n, seed, cfg.K)
    tcfg = TrainConfig(loss=spec, bound_B=cfg.bound_B, steps=cfg.steps, tol=cfg.tol,
                       lr=ConstantLR(), seed=seed)
    theta, _ = train(ds, env, tcfg)
    test = sample_pairs(env, cfg.test_n, rng.derive_seed(seed, 2)) if cfg.test_n else None
    rep = evaluate(env, theta, ds if ds.kind == "pair" else None, test, lam=cfg.lam,
                   bound_B=cfg.bound_B)
    wall = (time.perf_counter() - t0) * 1e3 if cfg.timing else 0.0
    digest = config_digest({"env": env.fingerprint(), "train": tcfg.to_dict(), "n": n,
                            "eps_true": eps_true, "lam": cfg.lam, "K": cfg.K,
                            "test_n": cfg.test_n})
    return {
        "method": method.label, "family": spec.family, "link": spec.link,
        "eps_true": eps_true, "eps_assumed": eps_assumed, "n": n, "seed": seed,
        "l2_error": rep.l2_error, "seminorm_error": rep.seminorm_error, "lambda": rep.lam,
        "subopt_gap": rep.subopt_gap, "margin_gap": rep.margin_gap,
        "eval_accuracy": rep.eval_accuracy, "kappa_rel_bound": rep.kappa_rel_bound,
        "gamma": rep.gamma, "wall_ms": wall,
        "env_hash": env.fingerprint(), "config_digest": digest,
    }


def _cell_task(args):
    env_dict, cell, cfg = args
    return run_cell(DiscreteEnv.from_dict(env_dict), *cell, cfg)


def _sort_key(row):
    return (row["method"], row["eps_true"], row["eps_assumed"], row["n"], row["seed"])


def run_sweep(cfg: SweepConfig, env: DiscreteEnv, workers: int = 1) -> list:
    """Run every cell; rows come back sorted so any worker count gives the same list."""
    cells = cfg.cells()
    if workers <= 1:
        rows = [run_cell(env, *c, cfg) for c in cells]
    else:
        env_dict = env.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_cell_task, [(env_dict, c, cfg) for c in cells]))
    return sorted(rows, key=_sort_key)


def write_rows(rows, path, append: bool = False) -> None:
    import os
    fresh = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        if fresh:
            out.writerow(ALL_COLUMNS)
        for row in rows:
            out.writerow([_fmt(row.get(c, "")) for c in ALL_COLUMNS])


def format_row(row) -> str:
    return ",".join(_fmt(row.get(c, "")) for c in ALL_COLUMNS)


def read_rows(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- slopes ------------------------------------------------------------------------

@dataclass(frozen=True)
class SlopeResult:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    x: tuple = field(default=())
    median: tuple = field(default=())


def _ols(lx, ly):
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(coef[0]), float(coef[1])


def loglog_slope(x, y, seeds=None, n_boot: int = 1000, boot_seed: int = 0) -> SlopeResult:
    """OLS of ``ln median(y)`` on ``ln x`` with a seed-bootstrap confidence interval.

    Parameters
    ----------
    x, y : array_like
        One entry per observation (for instance one sweep row).
    seeds : array_like, optional
        Seed label of each observation.  The bootstrap resamples seeds with
        replacement and recomputes the per-``x`` medians; without seeds every
        observation is its own seed.

    Returns
    -------
    SlopeResult
        Slope, intercept and the 2.5 / 97.5 percentile bootstrap interval.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be vectors of equal length")
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise ValueError("log-log fit needs positive finite values")
    seeds = np.arange(len(x)) if seeds is None else np.asarray(seeds)
    xs = np.unique(x)
    if len(xs) < 3:
        raise ValueError("need at least 3 distinct x values for a slope")
    lx = np.log(xs)

    def fit(weights):
        # weights[j] = multiplicity of seed j in the resample
        med = []
        for v in xs:
            mask = x == v
            vals = np.repeat(y[mask], weights[seed_idx[mask]])
            if vals.size == 0:
                return None
            med.append(np.median(vals))
        return _ols(lx, np.log(med)), med

    uniq, seed_idx = np.unique(seeds, return_inverse=True)
    (slope, icpt), med = fit(np.ones(len(uniq), dtype=int))
    gen = np.random.default_rng(boot_seed)
    boots = []
    for _ in range(n_boot):
        w = np.bincount(gen.integers(0, len(uniq), len(uniq)), minlength=len(uniq))
        res = fit(w)
        if res is not None:
            boots.append(res[0][0])
    lo, hi = (np.percentile(boots, [2.5, 97.5]) if boots else (math.nan, math.nan))
    return SlopeResult(slope, icpt, float(lo), float(hi), tuple(xs), tuple(map(float, med)))


def slope_from_rows(rows, x: str = "n", y: str = "l2_error", n_boot: int = 1000,
                    **filters) -> SlopeResult:
    """Fit a slope on CSV rows after keeping those whose columns equal ``filters``."""
    keep = [r for r in rows
            if all(str(r.get(k)) == str(v) for k, v in filters.items() if v is not None)]
    groups = {(r["method"], r["eps_true"], r["eps_assumed"]) for r in keep}
    if len(groups) > 1:
        raise ValueError(f"rows mix {len(groups)} (method, eps_true, eps_assumed) groups; "
                         "filter them first")
    return loglog_slope([float(r[x]) for r in keep], [float(r[y]) for r in keep],
                        [r["seed"] for r in keep], n_boot=n_boot)
