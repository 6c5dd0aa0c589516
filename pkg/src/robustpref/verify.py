"""Property suites that check the loss algebra and the error bounds exactly.

Each ``check_*`` function draws its own random instances from a seed and
returns plain numbers (worst deviations, counts), so the same routines back
both the ``verify`` subcommand and the test suite.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import expit, ndtr

from .data import ObservedPair, ObservedRanking, flip_pairs, sample_pairs
from .env import (
    DiscreteEnv,
    random_env,
    preference_score,
)
from .errors import CoverageError, InvalidRateError
from .losses import (
    LossSpec,
    flip_expectation,
    gradient_weights,
    margin_loss,
    neg_log_link,
    pair_loss,
    pair_loss_grad,
    ranking_loss,
    rdpo_variance_closed_form,
    robust_pref_logit,
)
from .metrics import (
    dominance_holds,
    estimation_error,
    expected_kl_tables,
    kappa_pi,
    kappa_rel_bound,
    margin_and_gap,
    sample_complexity,
    sample_cov_diff,
    subopt_gap,
    default_lambda,
    pop_cov,
)
from .env import log_policy_table, optimal_log_policy
from .optim import gamma_const, project
from .reward import reward_pair_loss

EPS_GRID = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45)
SUITES = ("lemmas", "gradients", "reductions", "bounds", "oracles")
_ROBUST_PAIR = (("rdpo", "logistic"), ("rdpo", "probit"), ("ripo", "logistic"),
                ("rslic", "logistic"))


class Instance:
    """A random small environment with a parameter and a clean pair."""

    def __init__(self, gen: np.random.Generator, actions=(2, 6), beta=None):
        S = int(gen.integers(1, 4))
        A = int(gen.integers(actions[0], actions[1] + 1))
        d = int(gen.integers(2, 7))
        beta = float(gen.choice([0.1, 0.5, 1.0, 2.0])) if beta is None else beta
        self.env = random_env(S, A, d, seed=int(gen.integers(2 ** 31)),
                              reward_scale=2.0, sft_scale=0.5, beta=beta)
        theta = gen.normal(scale=2.0, size=d)
        self.theta = theta - theta.mean()
        s = int(gen.integers(S))
        w, l = gen.choice(A, size=2, replace=False)
        self.pair = ObservedPair(s, int(w), int(l))
        self.swapped = ObservedPair(s, int(l), int(w))

    @property
    def x(self) -> float:
        return self.env.beta * preference_score(self.env, self.theta, *self.pair_tuple)

    @property
    def pair_tuple(self):
        return self.pair.prompt, self.pair.winner, self.pair.loser


def instances(n: int, seed: int, **kw):
    gen = np.random.default_rng(seed)
    return [Instance(gen, **kw) for _ in range(n)]


# -- lemmas ------------------------------------------------------------------------

def check_unbiasedness(n: int = 1000, seed: int = 0) -> dict:
    """Worst ``|E_flip[robust loss] - clean loss|`` per family."""
    worst = {f"{f}-{k}": 0.0 for f, k in _ROBUST_PAIR}
    worst["reward"] = 0.0
    gen = np.random.default_rng(seed + 1)
    for inst in instances(n, seed):
        eps = float(gen.choice(EPS_GRID))
        for fam, link in _ROBUST_PAIR:
            spec = LossSpec(fam, link, eps)
            mean = (1 - eps) * pair_loss(spec, inst.env, inst.theta, inst.pair) + \
                eps * pair_loss(spec, inst.env, inst.theta, inst.swapped)
            clean = pair_loss(spec.vanilla(), inst.env, inst.theta, inst.pair)
            key = f"{fam}-{link}"
            worst[key] = max(worst[key], abs(mean - clean))
        xi = inst.theta
        mean = (1 - eps) * reward_pair_loss(xi, inst.env, inst.pair, eps)[0] + \
            eps * reward_pair_loss(xi, inst.env, inst.swapped, eps)[0]
        clean = reward_pair_loss(xi, inst.env, inst.pair, 0.0)[0]
        worst["reward"] = max(worst["reward"], abs(mean - clean))
    worst["pl-robust-K3"] = check_pl_unbiasedness(n, seed)
    return worst


def check_pl_unbiasedness(n: int = 1000, seed: int = 0, K: int = 3) -> float:
    """Worst gap between the perturbation-averaged robust PL loss and the clean PL loss."""
    gen = np.random.default_rng(seed + 2)
    worst = 0.0
    for inst in instances(n, seed, actions=(K, 6)):
        eps = float(gen.choice(EPS_GRID))
        s = inst.pair.prompt
        acts = [int(a) for a in gen.choice(inst.env.n_actions, size=K, replace=False)]
        perms = list(itertools.permutations(acts))
        N = len(perms)
        if (1 - eps) * N - 1 <= 0:
            continue
        spec = LossSpec("pl-robust", eps=eps)
        clean = ranking_loss(LossSpec("pl"), inst.env, inst.theta, ObservedRanking(s, acts))
        mean = 0.0
        for p in perms:
            prob = 1 - eps if list(p) == acts else eps / (N - 1)
            mean += prob * ranking_loss(spec, inst.env, inst.theta, ObservedRanking(s, p))
        worst = max(worst, abs(mean - clean))
    return worst


def check_variance(n: int = 1000, seed: int = 0) -> dict:
    """Worst deviation of the flip variance from both closed forms."""
    gen = np.random.default_rng(seed + 3)
    out = {"closed_form": 0.0, "beta2_h2": 0.0}
    for inst in instances(n, seed):
        eps = float(gen.choice(EPS_GRID))
        _, var = flip_expectation(LossSpec("rdpo", eps=eps), inst.env, inst.theta, inst.pair)
        cf = rdpo_variance_closed_form(inst.env, inst.theta, inst.pair, eps)
        x = inst.x
        out["closed_form"] = max(out["closed_form"], abs(var - cf))
        out["beta2_h2"] = max(out["beta2_h2"], abs(var - eps * (1 - eps) * x * x))
    return out


def check_gradient_weights(n: int = 1000, seed: int = 0) -> dict:
    gen = np.random.default_rng(seed + 4)
    out = {"zeta_hat": 0.0, "zeta_bar": 0.0}
    for inst in instances(n, seed):
        eps = float(gen.choice(EPS_GRID))
        z, zb, zh = gradient_weights(inst.env, inst.theta, inst.pair, eps)
        out["zeta_hat"] = max(out["zeta_hat"], abs(zh - (z + eps / (1 - 2 * eps))))
        out["zeta_bar"] = max(out["zeta_bar"], abs(z - (zb + eps)))
    return out


def check_sgd_unbiased(n: int = 500, seed: int = 0) -> float:
    """Worst gap between the flip-averaged normalized rDPO gradient and the clean DPO gradient."""
    gen = np.random.default_rng(seed + 5)
    worst = 0.0
    for inst in instances(n, seed):
        eps = float(gen.choice(EPS_GRID))
        spec = LossSpec("rdpo", eps=eps)
        g = (1 - eps) * pair_loss_grad(spec, inst.env, inst.theta, inst.pair) + \
            eps * pair_loss_grad(spec, inst.env, inst.theta, inst.swapped)
        clean = pair_loss_grad(LossSpec("dpo"), inst.env, inst.theta, inst.pair)
        worst = max(worst, float(np.max(np.abs(g - clean))))
    return worst


def check_rate_guard(eps: float = 0.6) -> bool:
    """True when an out-of-range flip rate is rejected by every entry point."""
    env = random_env(1, 3, 2, seed=0)
    fired = 0
    attempts = (
        lambda: LossSpec("rdpo", eps=eps),
        lambda: flip_pairs(sample_pairs(env, 4, 0), eps, 1),
        lambda: gradient_weights(env, np.zeros(2), ObservedPair(0, 0, 1), eps),
        lambda: sample_complexity(1, 1, 1, 0.25, 1, eps),
    )
    for attempt in attempts:
        try:
            attempt()
        except InvalidRateError:
            fired += 1
    return fired == len(attempts)


# -- gradients ---------------------------------------------------------------------

GRADIENT_SPECS = (
    ("dpo", "logistic"), ("dpo", "probit"), ("cdpo", "logistic"), ("cdpo", "probit"),
    ("rdpo", "logistic"), ("rdpo", "probit"), ("ipo", "logistic"), ("ripo", "logistic"),
    ("slic", "logistic"), ("rslic", "logistic"), ("pl", "logistic"), ("pl-robust", "logistic"),
)


def finite_difference(f, theta, step: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = step
        g[i] = (f(theta + e) - f(theta - e)) / (2 * step)
    return g


def _ranking_grad(spec, env, theta, ranking, step=1e-7):
    # analytic gradient through the batch objective
    from .data import ObservedRankings
    from .losses import RankingBatch
    obs = ObservedRankings(np.array([ranking.prompt]), np.array([ranking.ranking]))
    return RankingBatch(env, obs).objective(spec, env, theta)[1]


def check_gradients(n: int = 500, seed: int = 0, step: float = 1e-5,
                    kink_margin: float = 1e-3) -> dict:
    """Worst relative error between analytic and central-difference gradients."""
    gen = np.random.default_rng(seed + 6)
    worst = {f"{f}-{k}": 0.0 for f, k in GRADIENT_SPECS}
    worst["reward"] = 0.0
    for inst in instances(n, seed, actions=(3, 6)):
        eps = float(gen.choice(EPS_GRID[:-1]))
        env, theta = inst.env, inst.theta
        for fam, link in GRADIENT_SPECS:
            spec = LossSpec(fam, link, eps if fam in ("cdpo", "rdpo", "ripo", "rslic",
                                                       "pl-robust") else 0.0)
            if spec.ranking:
                acts = [int(a) for a in gen.choice(env.n_actions, size=3, replace=False)]
                rk = ObservedRanking(inst.pair.prompt, acts)
                f = lambda th: ranking_loss(spec, env, th, rk)         # noqa: E731
                g = _ranking_grad(spec, env, theta, rk)
            else:
                if fam in ("slic", "rslic") and abs(abs(inst.x) - 1.0) <= kink_margin:
                    continue
                f = lambda th: pair_loss(spec, env, th, inst.pair)     # noqa: E731
                g = pair_loss_grad(spec, env, theta, inst.pair)
            fd = finite_difference(f, theta, step)
            rel = np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-6)
            key = f"{fam}-{link}"
            worst[key] = max(worst[key], float(rel))
        f = lambda xi: reward_pair_loss(xi, env, inst.pair, eps)[0]    # noqa: E731
        g = reward_pair_loss(theta, env, inst.pair, eps)[1]
        fd = finite_difference(f, theta, step)
        worst["reward"] = max(worst["reward"],
                              float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-6)))
    return worst


# -- reductions --------------------------------------------------------------------

def check_reductions(n: int = 1000, seed: int = 0) -> dict:
    """Worst deviations for eps = 0 collapses, K = 2 Plackett-Luce and logit preservation."""
    out = {"eps0": 0.0, "pl_k2_dpo": 0.0, "plrobust_k2_rdpo": 0.0, "logit": 0.0}
    gen = np.random.default_rng(seed + 7)
    for inst in instances(n, seed):
        env, theta, pair = inst.env, inst.theta, inst.pair
        for fam in ("cdpo", "rdpo", "ripo", "rslic"):
            for link in ("logistic", "probit"):
                robust = LossSpec(fam, link, 0.0)
                a = pair_loss(robust, env, theta, pair)
                b = pair_loss(robust.vanilla(), env, theta, pair)
                out["eps0"] = max(out["eps0"], abs(a - b))
        rk = ObservedRanking(pair.prompt, [pair.winner, pair.loser])
        out["eps0"] = max(out["eps0"], abs(ranking_loss(LossSpec("pl-robust"), env, theta, rk)
                                           - ranking_loss(LossSpec("pl"), env, theta, rk)))
        out["pl_k2_dpo"] = max(out["pl_k2_dpo"], abs(
            ranking_loss(LossSpec("pl"), env, theta, rk) - pair_loss(LossSpec(), env, theta, pair)))
        eps = float(gen.choice(EPS_GRID))
        out["plrobust_k2_rdpo"] = max(out["plrobust_k2_rdpo"], abs(
            ranking_loss(LossSpec("pl-robust", eps=eps), env, theta, rk)
            - pair_loss(LossSpec("rdpo", eps=eps), env, theta, pair)))
        x = inst.x
        out["logit"] = max(out["logit"], abs(float(robust_pref_logit(x, eps)) - x))
    return out


# -- bounds ----------------------------------------------------------------------

def bound_instances(seed: int = 0):
    """Endless stream of random realizable environments with an estimate and its data.

    Yields ``(env, theta_hat, Sigma_hat, lam)``; the estimate is the optimum
    plus a perturbation whose size shrinks like ``1 / sqrt(n_data)``.
    """
    gen = np.random.default_rng(seed)
    while True:
        S = int(gen.integers(1, 3))
        A = int(gen.integers(3, 7))
        d = int(gen.integers(2, 6))
        env = random_env(S, A, d, seed=int(gen.integers(2 ** 31)), reward_scale=1.0,
                         sft_scale=0.5, beta=float(gen.choice([0.5, 1.0, 2.0])))
        n_data = int(gen.choice([32, 128, 512]))
        ds = sample_pairs(env, n_data, int(gen.integers(2 ** 31)))
        noise = gen.normal(size=d) * gen.uniform(0.1, 3.0) / math.sqrt(n_data)
        B = 10.0 * (1 + np.linalg.norm(env.theta_opt))
        theta_hat = project(env.theta_opt + noise, B).theta
        yield env, theta_hat, sample_cov_diff(ds, env), default_lambda(d, n_data)


def check_bounds(n: int = 200, seed: int = 0, min_held: int = 0) -> dict:
    """Violation counts for the gap chain, the Pinsker step and the margin link.

    At least ``n`` instances are drawn, and more until the dominance
    precondition of the gap chain has held on ``min_held`` of them.
    """
    out = {"instances": 0, "precondition_held": 0, "gap_chain_violations": 0,
           "pinsker_violations": 0, "margin_violations": 0, "kappa_violations": 0,
           "coverage_skipped": 0}
    gen = np.random.default_rng(seed + 8)
    for env, theta_hat, Sigma_hat, lam in bound_instances(seed):
        if out["instances"] >= n and out["precondition_held"] >= min_held:
            break
        if out["instances"] >= 50 * max(n, min_held):
            raise RuntimeError("dominance precondition almost never holds")
        out["instances"] += 1
        gap = subopt_gap(env, theta_hat)
        r_max = float(np.max(np.abs(env.latent_reward)))
        kl = expected_kl_tables(env, optimal_log_policy(env), log_policy_table(env, theta_hat))
        if gap > r_max * math.sqrt(2 * kl) + 1e-12:
            out["pinsker_violations"] += 1
        semi, l2 = estimation_error(theta_hat, env.theta_opt, Sigma_hat, lam)
        _, mgap = margin_and_gap(env, theta_hat)
        if abs(mgap) > 2 * env.feature_bound * l2 + 1e-12:
            out["margin_violations"] += 1
        try:
            kbar = kappa_rel_bound(env)
        except CoverageError:
            out["coverage_skipped"] += 1
            continue
        # random policies never exceed the bound
        for _ in range(5):
            pi = gen.dirichlet(np.full(env.n_actions, 0.5), size=env.n_prompts)
            if kappa_pi(env, pi) > kbar * (1 + 1e-9):
                out["kappa_violations"] += 1
        if dominance_holds(Sigma_hat, lam, env):
            out["precondition_held"] += 1
            if gap > r_max * math.sqrt(kbar / 2) * semi + 1e-12:
                out["gap_chain_violations"] += 1
    return out


# -- fixed-value oracles -------------------------------------------------------------

def check_oracles() -> dict:
    """Absolute errors against values computed independently at high precision."""
    from .env import tabular_env
    env = tabular_env([[1.0, 0.0]])
    kl_env = tabular_env([[0.0, 0.0]])
    p = np.log([[0.75, 0.25]])
    u = np.log([[0.5, 0.5]])
    x = np.array([1.0])
    return {
        "sigmoid_1": abs(float(expit(1.0)) - 0.7310585786300049),
        "probit_1": abs(float(ndtr(1.0)) - 0.8413447460685429),
        "dpo_h0": abs(float(neg_log_link(0.0)) - math.log(2)),
        "dpo_x1": abs(float(margin_loss(LossSpec(), x)[0]) - 0.31326168751822286),
        "cdpo_x1": abs(float(margin_loss(LossSpec("cdpo", eps=0.1), x)[0]) - 0.41326168751822286),
        "rdpo_x1": abs(float(margin_loss(LossSpec("rdpo", eps=0.1), x)[0]) - 0.18826168751822286),
        "gamma_half_1": abs(gamma_const(0.5, 1.0) - 0.10499358540350652),
        "gamma_1_0": abs(gamma_const(1.0, 0.0) - 0.25),
        "kl_075": abs(expected_kl_tables(kl_env, p, u) - 0.13081203594113694),
        "sample_complexity": abs(sample_complexity(8, 4, 0.5, 0.25, 0.1, 0.25) - 819200),
        "pl_k3_uniform": abs(ranking_loss(LossSpec("pl"), tabular_env([[0.0] * 3]), np.zeros(3),
                                          ObservedRanking(0, [0, 1, 2])) - math.log(6)),
        "subopt_two_thirds": abs(
            subopt_gap(tabular_env([[1.0, 0.0]], beta=1 / math.log(2)), np.full((1, 2), 0.5))
            - 1 / 6),
        "pop_cov_uniform": float(np.max(np.abs(
            pop_cov(env, np.full((1, 2), 0.5)) - np.array([[0.25, -0.25], [-0.25, 0.25]])))),
    }


# -- suites ---------------------------------------------------------------------------

def _item(name, value, tol=None, passed=None):
    if passed is None:
        passed = bool(value <= tol)
    return {"name": name, "value": value, "tol": tol, "passed": bool(passed)}


def run_suite(name: str, seed: int = 0, scale: float = 1.0) -> dict:
    """Run one suite and return a JSON-ready report.

    ``scale`` multiplies instance counts (values below 1 give quick runs).
    """
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {SUITES}")
    k = lambda m: max(1, int(round(m * scale)))   # noqa: E731
    items = []
    extra = {}
    if name == "lemmas":
        for fam, v in check_unbiasedness(k(1000), seed).items():
            items.append(_item(f"unbiased/{fam}", v, 1e-12))
        var = check_variance(k(1000), seed)
        items.append(_item("variance/closed_form", var["closed_form"], 1e-12))
        items.append(_item("variance/beta2_h2", var["beta2_h2"], 1e-10))
        for key, v in check_gradient_weights(k(1000), seed).items():
            items.append(_item(f"weights/{key}", v, 1e-12))
        items.append(_item("sgd/unbiased_gradient", check_sgd_unbiased(k(500), seed), 1e-12))
        fired = check_rate_guard(0.6)
        items.append(_item("guard/eps=0.6", None, passed=fired))
        extra["guard_fired"] = fired
    elif name == "gradients":
        for key, v in check_gradients(k(500), seed).items():
            items.append(_item(f"fd/{key}", v, 1e-6))
    elif name == "reductions":
        red = check_reductions(k(1000), seed)
        items.append(_item("eps0", red["eps0"], 1e-15))
        items.append(_item("pl_k2_dpo", red["pl_k2_dpo"], 1e-12))
        items.append(_item("plrobust_k2_rdpo", red["plrobust_k2_rdpo"], 1e-12))
        items.append(_item("logit_preservation", red["logit"], 1e-12))
    elif name == "bounds":
        b = check_bounds(k(200), seed)
        extra.update(b)
        for key in ("gap_chain_violations", "pinsker_violations", "margin_violations",
                    "kappa_violations"):
            items.append(_item(key, b[key], 0))
    else:
        for key, v in check_oracles().items():
            items.append(_item(key, v, 1e-12))
    return {"suite": name, "seed": seed, "passed": all(i["passed"] for i in items),
            "checks": items, **extra}
