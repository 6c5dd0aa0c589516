"""Discrete environments and the log-linear softmax policy class.

An environment is a finite set of prompts with a fixed number of actions per
prompt, a feature map ``phi(s, a)``, a latent reward ``r*(s, a)`` and an SFT
parameter ``theta_sft``.  Policies are

.. math::

    \\pi_\\theta(a|s) \\propto \\exp(\\theta^\\top \\phi(s, a))

so every population quantity used elsewhere in the package is an exact
finite sum over the ``(S, A)`` tables built here.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import expit, logsumexp, ndtr

from .errors import (
    DegeneratePairError,
    EnvValidationError,
    NumericRangeError,
)

PREF_MODELS = ("btl", "probit")

ArrayLike = Union[np.ndarray, list, tuple]


def _frozen(x, dtype=float):
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


def link_cdf(z, model: str = "btl"):
    """Map reward differences to win probabilities (sigmoid or normal CDF)."""
    if model == "btl":
        return expit(z)
    if model == "probit":
        return ndtr(z)
    raise EnvValidationError(f"unknown preference model {model!r}")


@dataclass(frozen=True, eq=False)
class DiscreteEnv:
    """Finite prompt/action world in which every expectation is a finite sum.

    Parameters
    ----------
    prompt_weights : array, shape (S,)
        Prompt distribution ``rho``.
    features : array, shape (S, A, d)
        Feature vectors ``phi(s, a)``.
    latent_reward : array, shape (S, A), optional
        Explicit reward table.  Omit it to induce ``r* = theta_star . phi``.
    theta_star : array, shape (d,), optional
        Linear reward parameter.  When given, the optimal policy lies in the
        log-linear class with parameter :attr:`theta_opt`.
    theta_sft : array, shape (d,), optional
        SFT parameter ``theta_0``; zeros by default.
    beta : float
        KL-regularization strength.
    pref_model : {"btl", "probit"}
    """

    prompt_weights: np.ndarray
    features: np.ndarray
    latent_reward: Optional[np.ndarray] = None
    theta_star: Optional[np.ndarray] = None
    theta_sft: Optional[np.ndarray] = None
    beta: float = 1.0
    pref_model: str = "btl"
    _canonicalized: bool = field(default=False, repr=False)

    def __post_init__(self):
        rho = _frozen(self.prompt_weights)
        phi = _frozen(self.features)
        if rho.ndim != 1 or rho.size < 1:
            raise EnvValidationError("prompt_weights must be a non-empty vector")
        if not np.all(np.isfinite(rho)) or np.any(rho < 0):
            raise EnvValidationError("prompt_weights must be finite and non-negative")
        if abs(rho.sum() - 1.0) > 1e-12:
            raise EnvValidationError(
                f"prompt_weights must sum to 1 (got {rho.sum()!r})")
        if phi.ndim != 3 or phi.shape[0] != rho.size:
            raise EnvValidationError(
                "features must have shape (n_prompts, n_actions, dim)")
        S, A, d = phi.shape
        if A < 2:
            raise EnvValidationError("every prompt needs at least 2 actions")
        if d < 1:
            raise EnvValidationError("feature dimension must be >= 1")
        if not np.all(np.isfinite(phi)):
            raise EnvValidationError("features must be finite")

        beta = float(self.beta)
        if not np.isfinite(beta) or beta <= 0:
            raise EnvValidationError(f"beta must be finite and > 0 (got {beta!r})")
        if self.pref_model not in PREF_MODELS:
            raise EnvValidationError(f"pref_model must be one of {PREF_MODELS}")

        theta_sft = np.zeros(d) if self.theta_sft is None else np.array(
            self.theta_sft, dtype=float)
        if theta_sft.shape != (d,) or not np.all(np.isfinite(theta_sft)):
            raise EnvValidationError(f"theta_sft must be a finite vector of length {d}")

        theta_star = None
        if self.theta_star is not None:
            theta_star = np.array(self.theta_star, dtype=float)
            if theta_star.shape != (d,) or not np.all(np.isfinite(theta_star)):
                raise EnvValidationError(
                    f"theta_star must be a finite vector of length {d}")

        # Shifting a parameter along the all-ones direction only moves rewards
        # by a per-prompt constant when the feature sum is constant per prompt.
        # Only then can it be moved into the zero-sum set for free.
        canonical = False
        coord_sums = phi.sum(axis=2)
        if np.allclose(coord_sums, coord_sums[:, :1], atol=1e-12, rtol=0):
            for vec in (theta_sft, theta_star):
                if vec is not None and abs(vec.sum()) > 1e-12:
                    vec -= vec.mean()
                    canonical = True

        if self.latent_reward is not None:
            reward = np.array(self.latent_reward, dtype=float)
            if reward.shape != (S, A):
                raise EnvValidationError(f"latent_reward must have shape ({S}, {A})")
            if theta_star is not None and not np.allclose(
                    reward - reward.mean(axis=1, keepdims=True),
                    (phi @ theta_star) - (phi @ theta_star).mean(axis=1, keepdims=True),
                    atol=1e-9):
                raise EnvValidationError(
                    "latent_reward disagrees with theta_star beyond per-prompt shifts")
        elif theta_star is not None:
            reward = phi @ theta_star
        else:
            raise EnvValidationError("need latent_reward or theta_star")
        if not np.all(np.isfinite(reward)):
            raise EnvValidationError("latent_reward must be finite")

        set_ = object.__setattr__
        set_(self, "prompt_weights", rho)
        set_(self, "features", phi)
        set_(self, "latent_reward", _frozen(reward))
        set_(self, "theta_star", None if theta_star is None else _frozen(theta_star))
        set_(self, "theta_sft", _frozen(theta_sft))
        set_(self, "beta", beta)
        set_(self, "_canonicalized", canonical)

    @property
    def n_prompts(self) -> int:
        return self.features.shape[0]

    @property
    def n_actions(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @cached_property
    def feature_bound(self) -> float:
        """``L = max ||phi(s, a)||_2``."""
        return float(np.linalg.norm(self.features, axis=2).max())

    @property
    def realizable(self) -> bool:
        return self.theta_star is not None

    @cached_property
    def theta_opt(self) -> Optional[np.ndarray]:
        """Policy parameter of the optimal policy, ``theta_sft + theta_star / beta``.

        ``None`` when the reward is given only as a table.
        """
        if self.theta_star is None:
            return None
        return _frozen(self.theta_sft + self.theta_star / self.beta)

    @cached_property
    def sft_log_policy(self) -> np.ndarray:
        return _frozen(log_policy_table(self, self.theta_sft))

    @cached_property
    def sft_policy(self) -> np.ndarray:
        return _frozen(np.exp(self.sft_log_policy))

    def check_prompt(self, s: int) -> int:
        if not (0 <= int(s) < self.n_prompts) or int(s) != s:
            raise IndexError(f"prompt index {s} out of range [0, {self.n_prompts})")
        return int(s)

    def check_action(self, a: int) -> int:
        if not (0 <= int(a) < self.n_actions) or int(a) != a:
            raise IndexError(f"action index {a} out of range [0, {self.n_actions})")
        return int(a)

    def check_pair(self, s, a, a_prime):
        s = self.check_prompt(s)
        a, a_prime = self.check_action(a), self.check_action(a_prime)
        if a == a_prime:
            raise DegeneratePairError(f"cannot compare action {a} with itself")
        return s, a, a_prime

    def to_dict(self) -> dict:
        out = {
            "prompt_weights": self.prompt_weights.tolist(),
            "features": self.features.tolist(),
        }
        if self.theta_star is not None:
            out["latent_reward"] = {"theta_star": self.theta_star.tolist()}
        else:
            out["latent_reward"] = self.latent_reward.tolist()
        out["theta_sft"] = self.theta_sft.tolist()
        out["beta"] = self.beta
        out["pref_model"] = self.pref_model
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "DiscreteEnv":
        if not isinstance(obj, dict):
            raise EnvValidationError("environment file must hold a JSON object")
        for key in ("prompt_weights", "features", "latent_reward", "beta"):
            if key not in obj:
                raise EnvValidationError(f"missing key {key!r}")
        reward = obj["latent_reward"]
        theta_star = None
        if isinstance(reward, dict):
            if "theta_star" not in reward:
                raise EnvValidationError("latent_reward object needs 'theta_star'")
            theta_star, reward = reward["theta_star"], None
        try:
            return cls(
                prompt_weights=obj["prompt_weights"],
                features=obj["features"],
                latent_reward=reward,
                theta_star=theta_star,
                theta_sft=obj.get("theta_sft"),
                beta=obj["beta"],
                pref_model=obj.get("pref_model", "btl"),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, EnvValidationError):
                raise
            raise EnvValidationError(str(exc)) from exc

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON serialization."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_env(env: DiscreteEnv, path) -> str:
    Path(path).write_text(json.dumps(env.to_dict(), indent=1), encoding="utf-8")
    return env.fingerprint()


def load_env(path) -> DiscreteEnv:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise EnvValidationError(f"{path}: not valid JSON ({exc})") from exc
    return DiscreteEnv.from_dict(obj)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """A parameter in ``{theta : sum(theta) = 0, ||theta|| <= bound_B}``."""

    theta: np.ndarray
    bound_B: float

    def __post_init__(self):
        theta = _frozen(self.theta)
        if theta.ndim != 1:
            raise ValueError("theta must be a vector")
        if abs(theta.sum()) > 1e-9:
            raise ValueError(f"theta must sum to zero (sum={theta.sum():.3e})")
        if np.linalg.norm(theta) > self.bound_B + 1e-9:
            raise ValueError("theta exceeds the norm bound")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "bound_B", float(self.bound_B))


def as_theta(theta) -> np.ndarray:
    if isinstance(theta, PolicyParams):
        return theta.theta
    return np.asarray(theta, dtype=float)


# -- policy class ------------------------------------------------------------

def log_policy_table(env: DiscreteEnv, theta) -> np.ndarray:
    """``log pi_theta(a|s)`` for every prompt and action, shape (S, A)."""
    scores = env.features @ as_theta(theta)
    return scores - logsumexp(scores, axis=1, keepdims=True)


def policy_table(env: DiscreteEnv, theta) -> np.ndarray:
    return np.exp(log_policy_table(env, theta))


def policy_log_probs(env: DiscreteEnv, theta, s: int) -> np.ndarray:
    """Log-probabilities of every action at prompt ``s``."""
    s = env.check_prompt(s)
    scores = env.features[s] @ as_theta(theta)
    return scores - logsumexp(scores)


def implicit_reward_table(env: DiscreteEnv, theta) -> np.ndarray:
    """``log(pi_theta / pi_sft)`` for every prompt and action."""
    return log_policy_table(env, theta) - env.sft_log_policy


def implicit_reward(env: DiscreteEnv, theta, s: int, a: int) -> float:
    s, a = env.check_prompt(s), env.check_action(a)
    return float(policy_log_probs(env, theta, s)[a] - env.sft_log_policy[s, a])


def preference_score(env: DiscreteEnv, theta, s: int, a: int, a_prime: int) -> float:
    """Difference of implicit rewards, evaluated through the log-partitions."""
    s, a, a_prime = env.check_pair(s, a, a_prime)
    logp = policy_log_probs(env, theta, s)
    sft = env.sft_log_policy[s]
    return float((logp[a] - sft[a]) - (logp[a_prime] - sft[a_prime]))


def linear_score(env: DiscreteEnv, theta, s, a, a_prime):
    """Partition-free preference score ``(theta - theta_sft) . (phi_a - phi_a')``.

    Vectorized over index arrays; no degenerate-pair check.
    """
    delta = env.features[s, a] - env.features[s, a_prime]
    return delta @ (as_theta(theta) - env.theta_sft)


def true_pref_prob(env: DiscreteEnv, s: int, a: int, a_prime: int) -> float:
    s, a, a_prime = env.check_pair(s, a, a_prime)
    r = env.latent_reward[s]
    return float(link_cdf(r[a] - r[a_prime], env.pref_model))


def true_pref_table(env: DiscreteEnv) -> np.ndarray:
    """``p*(a > a' | s)`` for all pairs, shape (S, A, A); diagonal is 1/2."""
    r = env.latent_reward
    return link_cdf(r[:, :, None] - r[:, None, :], env.pref_model)


def predicted_pref_prob(env: DiscreteEnv, theta, s: int, a: int, a_prime: int) -> float:
    """Win probability implied by the policy, ``g(beta * h_theta)``."""
    h = preference_score(env, theta, s, a, a_prime)
    return float(link_cdf(env.beta * h, env.pref_model))


def optimal_log_policy(env: DiscreteEnv) -> np.ndarray:
    with np.errstate(over="ignore"):
        scaled = env.latent_reward / env.beta
    if not np.all(np.isfinite(scaled)):
        raise NumericRangeError("latent_reward / beta is not finite")
    logits = env.sft_log_policy + scaled
    return logits - logsumexp(logits, axis=1, keepdims=True)


def optimal_policy(env: DiscreteEnv) -> np.ndarray:
    """KL-regularized optimum ``pi* ~ pi_sft * exp(r* / beta)``, shape (S, A)."""
    return np.exp(optimal_log_policy(env))


# -- constructors ------------------------------------------------------------

def tabular_features(n_prompts: int, n_actions: int) -> np.ndarray:
    """One-hot features with ``d = n_prompts * n_actions``."""
    d = n_prompts * n_actions
    return np.eye(d).reshape(n_prompts, n_actions, d)


def tabular_env(rewards: ArrayLike, beta: float = 1.0, prompt_weights=None,
                theta_sft=None, pref_model: str = "btl") -> DiscreteEnv:
    """Tabular environment whose reward table is realizable by construction.

    ``theta_star`` is the reward table centred per prompt, flattened.
    """
    rewards = np.atleast_2d(np.asarray(rewards, dtype=float))
    S, A = rewards.shape
    if prompt_weights is None:
        prompt_weights = np.full(S, 1.0 / S)
    centred = rewards - rewards.mean(axis=1, keepdims=True)
    return DiscreteEnv(
        prompt_weights=prompt_weights,
        features=tabular_features(S, A),
        theta_star=centred.ravel(),
        theta_sft=theta_sft,
        beta=beta,
        pref_model=pref_model,
    )


def random_env(n_prompts: int, n_actions: int, dim: int, seed: int = 0,
               reward_scale: float = 1.0, sft_scale: float = 0.5,
               beta: float = 1.0, pref_model: str = "btl") -> DiscreteEnv:
    """Random realizable log-linear environment.

    Features are Gaussian rescaled to unit maximum norm; ``theta_star`` and
    ``theta_sft`` are zero-sum with norms ``reward_scale`` and ``sft_scale``.
    """
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((n_prompts, n_actions, dim))
    phi /= np.linalg.norm(phi, axis=2).max()

    def zero_sum(scale):
        v = rng.standard_normal(dim)
        v -= v.mean()
        norm = np.linalg.norm(v)
        return v * (scale / norm) if norm > 0 else v

    rho = rng.dirichlet(np.full(n_prompts, 2.0))
    # dirichlet output can miss 1 by a few ulps; renormalise in long double
    rho = (rho / rho.astype(np.longdouble).sum()).astype(float)
    rho[-1] = 1.0 - rho[:-1].sum()
    if rho[-1] < 0:
        rho = np.full(n_prompts, 1.0 / n_prompts)

    return DiscreteEnv(
        prompt_weights=rho,
        features=phi,
        theta_star=zero_sum(reward_scale),
        theta_sft=zero_sum(sft_scale) if sft_scale > 0 else None,
        beta=beta,
        pref_model=pref_model,
    )
