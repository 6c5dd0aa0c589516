"""Exact evaluation of trained policies on a discrete environment.

All population quantities are finite sums over prompts and actions, so
nothing here is estimated by sampling.  Parameter errors are measured
against ``env.theta_opt``, the parameter of the optimal policy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import PreferenceDataset
from .env import (
    DiscreteEnv,
    PolicyParams,
    as_theta,
    implicit_reward_table,
    log_policy_table,
    optimal_log_policy,
    optimal_policy,
    policy_table,
    true_pref_table,
)
from .errors import CoverageError, InvalidPolicyError, KindMismatchError
from .linalg import pair_law, restricted_eigvalsh
from .losses import check_eps
from .optim import gamma_const

_COVERAGE_TOL = 1e-12


# -- covariances ----------------------------------------------------------------

def sample_cov_diff(ds: PreferenceDataset, env: DiscreteEnv, clean: bool = True) -> np.ndarray:
    """``(1/n) sum x_i x_i^T`` with ``x_i = phi(s_i, w_i) - phi(s_i, l_i)``.

    ``clean=False`` uses the observed labels; the outer product is sign
    invariant so both give the same matrix up to rounding.
    """
    if ds.kind != "pair":
        raise KindMismatchError("sample_cov_diff needs a pairwise dataset")
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    if clean:
        w, l = ds.cw, ds.cl
    else:
        w, l = ds.w, ds.l
    X = env.features[ds.s, w] - env.features[ds.s, l]
    return X.T @ X / len(X)


def check_policy(env: DiscreteEnv, policy) -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (env.n_prompts, env.n_actions):
        raise InvalidPolicyError(f"policy table must have shape {(env.n_prompts, env.n_actions)}")
    if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidPolicyError("policy rows must be probability vectors")
    return pi


def pop_cov(env: DiscreteEnv, policy) -> np.ndarray:
    """``E[phi phi^T] - E[phi] E[phi]^T`` under ``s ~ rho, a ~ pi(.|s)``."""
    pi = check_policy(env, policy)
    w = env.prompt_weights[:, None] * pi
    phi = env.features
    mean = np.einsum("sa,sad->d", w, phi)
    second = np.einsum("sa,sad,sae->de", w, phi, phi)
    cov = second - np.outer(mean, mean)
    return 0.5 * (cov + cov.T)


def pop_diff_cov(env: DiscreteEnv) -> np.ndarray:
    """Population second moment of ``phi(s, a) - phi(s, a')`` under the pair sampler."""
    P = pair_law(env)
    D = env.features[:, :, None, :] - env.features[:, None, :, :]
    return np.einsum("sab,sabd,sabe->de", P, D, D)


def sft_min_eig(env: DiscreteEnv) -> float:
    """Smallest eigenvalue of ``Sigma_sft`` on the zero-sum subspace."""
    ev = restricted_eigvalsh(pop_cov(env, env.sft_policy))
    return float(ev[0]) if ev.size else 0.0


def kappa_cov(env: DiscreteEnv) -> float:
    """Smallest eigenvalue of the feature-difference covariance on the zero-sum subspace."""
    ev = restricted_eigvalsh(pop_diff_cov(env))
    return float(ev[0]) if ev.size else 0.0


def kappa_rel_bound(env: DiscreteEnv) -> float:
    """``L^2 / lambda_min(Sigma_sft)``, an upper bound on every ``kappa_pi``."""
    lo = sft_min_eig(env)
    if lo <= _COVERAGE_TOL:
        raise CoverageError(f"Sigma_sft is singular (lambda_min = {lo:.3g})")
    return env.feature_bound ** 2 / lo


def kappa_pi(env: DiscreteEnv, policy) -> float:
    """``lambda_max(Sigma_pi) / lambda_min(Sigma_sft)``."""
    lo = sft_min_eig(env)
    if lo <= _COVERAGE_TOL:
        raise CoverageError(f"Sigma_sft is singular (lambda_min = {lo:.3g})")
    ev = restricted_eigvalsh(pop_cov(env, policy))
    return float(ev[-1]) / lo


def dominance_holds(Sigma_hat: np.ndarray, lam: float, env: DiscreteEnv,
                    tol: float = 1e-12) -> bool:
    """Whether ``Sigma_hat + lam I >= 2 Sigma_sft`` on the zero-sum subspace."""
    M = Sigma_hat + lam * np.eye(env.dim) - 2.0 * pop_cov(env, env.sft_policy)
    ev = restricted_eigvalsh(M)
    return bool(ev.size == 0 or ev[0] >= -tol)


# -- errors and gaps --------------------------------------------------------------

def default_lambda(d: int, n: int) -> float:
    """``sqrt(d ln(4d) / n)``."""
    if d < 1 or n < 1:
        raise ValueError("d and n must be positive")
    return math.sqrt(d * math.log(4 * d) / n)


def estimation_error(theta_hat, theta_star, Sigma_hat, lam: float):
    """``(||delta||_{Sigma_hat + lam I}, ||delta||_2)``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    delta = as_theta(theta_hat) - as_theta(theta_star)
    quad = float(delta @ np.asarray(Sigma_hat) @ delta) + lam * float(delta @ delta)
    return math.sqrt(max(quad, 0.0)), float(np.linalg.norm(delta))


def _table(env, policy_or_theta):
    arr = policy_or_theta.theta if isinstance(policy_or_theta, PolicyParams) else \
        np.asarray(policy_or_theta, dtype=float)
    if arr.ndim == 2:
        return check_policy(env, arr)
    return policy_table(env, arr)


def policy_value(env: DiscreteEnv, policy_or_theta) -> float:
    """``E_{s ~ rho, a ~ pi}[r*(s, a)]``."""
    pi = _table(env, policy_or_theta)
    return float(env.prompt_weights @ (pi * env.latent_reward).sum(axis=1))


def subopt_gap(env: DiscreteEnv, policy_or_theta) -> float:
    """``r*(pi*) - r*(pi_hat)``; takes a parameter vector or a policy table."""
    return policy_value(env, optimal_policy(env)) - policy_value(env, policy_or_theta)


def margin(env: DiscreteEnv, implicit_rewards: np.ndarray) -> float:
    """Average implicit-reward difference, winner minus loser, over SFT pairs.

    Both actions are drawn independently from the SFT policy (equal draws
    contribute zero) and the winner follows the latent preference.
    """
    pi = env.sft_policy
    P = true_pref_table(env)
    R = implicit_rewards
    D = R[:, :, None] - R[:, None, :]
    # the ordered sum sees each draw order once; (a, b) and (b, a) draws
    # contribute equally, hence the factor two
    W = pi[:, :, None] * pi[:, None, :] * P
    return float(2.0 * env.prompt_weights @ (W * D).sum(axis=(1, 2)))


def margin_and_gap(env: DiscreteEnv, theta, theta_star=None):
    """``(M(pi_theta), M(pi*) - M(pi_theta))``.

    The reference is ``pi*`` from :func:`optimal_policy` unless a parameter
    ``theta_star`` for it is supplied.
    """
    m = margin(env, implicit_reward_table(env, theta))
    if theta_star is None:
        ref = margin(env, optimal_log_policy(env) - env.sft_log_policy)
    else:
        ref = margin(env, implicit_reward_table(env, theta_star))
    return m, ref - m


def eval_accuracy(theta, env: DiscreteEnv, test_ds: PreferenceDataset) -> float:
    """Fraction of clean test pairs with ``r_hat(s, w) > r_hat(s, l)`` strictly."""
    if test_ds.kind != "pair":
        raise KindMismatchError("eval_accuracy needs a pairwise dataset")
    if len(test_ds) == 0:
        raise ValueError("test set is empty")
    delta = as_theta(theta) - env.theta_sft
    # partition-free score: ties between equal-score actions stay exact zeros
    h = (env.features[test_ds.s, test_ds.cw] - env.features[test_ds.s, test_ds.cl]) @ delta
    return float(np.mean(h > 0))


def expected_accuracy(env: DiscreteEnv, theta) -> float:
    """Exact expectation of :func:`eval_accuracy` on freshly sampled clean pairs."""
    delta = as_theta(theta) - env.theta_sft
    score = env.features @ delta
    better = score[:, :, None] > score[:, None, :]
    P = true_pref_table(env)
    # sampled pair (a, b): winner a w.p. p*(a > b), winner b otherwise
    correct = P * better + np.swapaxes(P * better, 1, 2)
    return float((pair_law(env) * correct).sum())


def expected_kl_tables(env: DiscreteEnv, log_pa: np.ndarray, log_pb: np.ndarray) -> float:
    """``E_{s ~ rho} KL(pa(.|s) || pb(.|s))`` from log-probability tables."""
    pa = np.exp(log_pa)
    with np.errstate(invalid="ignore"):
        terms = np.where(pa > 0, pa * (log_pa - log_pb), 0.0)
    kl = terms.sum(axis=1)
    return float(env.prompt_weights @ kl)


def expected_kl(env: DiscreteEnv, theta_a, theta_b) -> float:
    """``E_{s ~ rho} KL(pi_a(.|s) || pi_b(.|s))`` in nats."""
    return expected_kl_tables(env, log_policy_table(env, theta_a), log_policy_table(env, theta_b))


def sample_complexity(kappa_rel: float, d: int, delta_gap: float, gamma: float,
                      beta: float, eps: float) -> int:
    """``ceil(kappa d / (Delta^2 gamma^2 beta^2 (1 - 2 eps)^2))``."""
    eps = check_eps(eps)
    for name, v in (("kappa_rel", kappa_rel), ("d", d), ("delta_gap", delta_gap),
                    ("gamma", gamma), ("beta", beta)):
        if not v > 0:
            raise ValueError(f"{name} must be positive")
    v = kappa_rel * d / (delta_gap ** 2 * gamma ** 2 * beta ** 2 * (1 - 2 * eps) ** 2)
    r = round(v)
    # exact integers should not be bumped by rounding in the last bit
    if abs(v - r) <= 1e-9 * max(1.0, v):
        return int(r)
    return int(math.ceil(v))


# -- report ---------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    """Diagnostics for one trained policy.

    Gaps are in reward units and ``expected_kl`` (of ``pi*`` from ``pi_hat``)
    in nats.  Quantities that need a realizable optimum or a covering SFT
    policy are ``nan`` when unavailable.
    """

    l2_error: float
    seminorm_error: float
    lam: float
    subopt_gap: float
    margin: float
    margin_gap: float
    eval_accuracy: float
    kappa_rel_bound: float
    kappa_cov: float
    gamma: float
    expected_kl: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(env: DiscreteEnv, theta_hat, train_ds: Optional[PreferenceDataset] = None,
             test_ds: Optional[PreferenceDataset] = None, lam: Optional[float] = None,
             bound_B: Optional[float] = None) -> MetricsReport:
    """Compute a :class:`MetricsReport`.

    Parameters
    ----------
    train_ds : PreferenceDataset, optional
        Pairwise training data; supplies ``Sigma_hat`` for the semi-norm.
    test_ds : PreferenceDataset, optional
        Clean pairwise test data for the accuracy; without it the exact
        expected accuracy is reported.
    lam : float, optional
        Semi-norm regularizer, default ``sqrt(d ln(4d) / n)``.
    bound_B : float, optional
        Norm bound used for ``gamma`` (``alpha0 = L B``); taken from
        ``theta_hat`` when it is a :class:`PolicyParams`.
    """
    theta = as_theta(theta_hat)
    if bound_B is None:
        bound_B = theta_hat.bound_B if isinstance(theta_hat, PolicyParams) else \
            max(float(np.linalg.norm(theta)), 1.0)
    nan = float("nan")
    l2 = semi = lam_used = nan
    if env.realizable:
        target = env.theta_opt
        l2 = float(np.linalg.norm(theta - target))
        if train_ds is not None and train_ds.kind == "pair":
            lam_used = default_lambda(env.dim, len(train_ds)) if lam is None else float(lam)
            semi, l2 = estimation_error(theta, target, sample_cov_diff(train_ds, env), lam_used)
    m, mgap = margin_and_gap(env, theta)
    acc = eval_accuracy(theta, env, test_ds) if test_ds is not None else \
        expected_accuracy(env, theta)
    try:
        krb = kappa_rel_bound(env)
    except CoverageError:
        krb = nan
    kl = expected_kl_tables(env, optimal_log_policy(env), log_policy_table(env, theta))
    return MetricsReport(
        l2_error=l2, seminorm_error=semi, lam=lam_used,
        subopt_gap=subopt_gap(env, theta), margin=m, margin_gap=mgap,
        eval_accuracy=acc, kappa_rel_bound=krb, kappa_cov=kappa_cov(env),
        gamma=gamma_const(env.beta, env.feature_bound * bound_B), expected_kl=kl)
