"""Robust reward modelling followed by exact KL-regularized policy extraction.

A linear reward ``r_xi(s, a) = xi . phi(s, a)`` is fitted with the same
pairwise losses as the policy (with ``beta = 1`` and no reference
parameter), then plugged into ``pi(a|s) ∝ pi_sft(a|s) exp(r_xi(s, a) / beta)``.
On a finite action set that policy is the exact optimum of the
KL-regularized objective, so no policy-gradient loop is needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

from .data import ObservedPair, PreferenceDataset
from .env import DiscreteEnv, PolicyParams, as_theta
from .errors import KindMismatchError, ProvenanceError
from .losses import LossSpec, margin_loss, margin_loss_dx, pair_features
from .optim import ConstantLR, TrainConfig, compress, projected_gd, smoothness


@dataclass(frozen=True)
class RewardParams(PolicyParams):
    """Reward parameter ``xi`` with the same zero-sum and norm constraints as a policy."""

    @property
    def xi(self) -> np.ndarray:
        return self.theta


def _spec(eps: float, link: str = "logistic") -> LossSpec:
    return LossSpec("rdpo", link, eps) if eps > 0 else LossSpec("dpo", link)


def reward_pair_loss(xi, env: DiscreteEnv, pair: ObservedPair, eps: float = 0.0,
                     link: str = "logistic"):
    """Loss and gradient of one pair under the linear reward ``xi``.

    The score is the reward difference ``r_xi(s, w) - r_xi(s, l)``; ``eps > 0``
    gives the de-biased form.
    """
    s, w, l = env.check_pair(pair.prompt, pair.winner, pair.loser)
    diff = env.features[s, w] - env.features[s, l]
    x = float(diff @ as_theta(xi))
    spec = _spec(eps, link)
    return float(margin_loss(spec, x)), float(margin_loss_dx(spec, x)) * diff


def reward_objective(spec: LossSpec, diffs: np.ndarray, weights=None):
    w = np.full(len(diffs), 1.0 / len(diffs)) if weights is None else weights

    def objective(xi):
        x = diffs @ xi
        return float(w @ margin_loss(spec, x)), (w * margin_loss_dx(spec, x)) @ diffs
    return objective


def train_reward(ds, env: DiscreteEnv, cfg: TrainConfig):
    """Fit ``xi`` by full-batch projected gradient descent.

    ``cfg.loss`` must be a pairwise family; its ``eps`` is the assumed flip
    rate.  Returns ``(RewardParams, trace)``.
    """
    obs = ds.observed() if isinstance(ds, PreferenceDataset) else ds
    if isinstance(ds, PreferenceDataset) and ds.kind != "pair":
        raise KindMismatchError("reward training needs pairwise data")
    if cfg.loss.ranking:
        raise KindMismatchError("reward training uses a pairwise loss")
    if len(obs) == 0:
        raise ValueError("dataset is empty")
    obs, weights = compress(obs)
    diffs = pair_features(env, obs)
    # unit-beta smoothness: rescale the policy bound by 1 / beta^2
    eta = cfg.lr.eta if isinstance(cfg.lr, ConstantLR) and cfg.lr.eta else \
        env.beta ** 2 / smoothness(cfg.loss, env, obs, weights)
    init = np.zeros(env.dim) if cfg.init is None else np.array(cfg.init)
    steps = 5000 if cfg.steps is None else cfg.steps
    theta, trace = projected_gd(reward_objective(cfg.loss, diffs, weights), init, cfg.bound_B,
                                eta, steps, cfg.tol)
    return RewardParams(theta.theta, cfg.bound_B), trace


def reward_table(env: DiscreteEnv, xi) -> np.ndarray:
    return env.features @ as_theta(xi)


def policy_from_reward(env: DiscreteEnv, xi, beta: float = None) -> np.ndarray:
    """``pi(a|s) ∝ pi_sft(a|s) exp(r_xi(s, a) / beta)``; ``beta`` defaults to the env's."""
    beta = env.beta if beta is None else float(beta)
    if not beta > 0:
        raise ValueError("beta must be positive")
    logits = env.sft_log_policy + reward_table(env, xi) / beta
    return np.exp(log_softmax(logits, axis=1))


def angle(u, v) -> float:
    """Angle in radians between two non-zero vectors."""
    u, v = as_theta(u), as_theta(v)
    c = float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def save_reward(params: RewardParams, env: DiscreteEnv, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"env_hash": env.fingerprint(), "bound_B": params.bound_B,
                   "xi": params.xi.tolist()}, fh)


def load_reward(path, env: DiscreteEnv = None) -> RewardParams:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if env is not None and obj.get("env_hash") != env.fingerprint():
        raise ProvenanceError("reward file belongs to a different environment")
    return RewardParams(np.asarray(obj["xi"], dtype=float), float(obj["bound_B"]))
