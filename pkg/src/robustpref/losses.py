"""Per-sample preference losses, their gradients, and the de-biasing algebra.

Every pairwise loss here is a function of the scaled preference score
``x = beta * h_theta(s, a_w, a_l)``.  A base loss ``l(x)`` is turned into

* the vanilla loss        ``l(x)``
* the conservative loss   ``(1 - eps) l(x) + eps l(-x)``
* the robust loss         ``((1 - eps) l(x) - eps l(-x)) / (1 - 2 eps)``

The robust loss has the clean loss as its expectation over random label
flips with rate ``eps``.  Base losses are the negative log-link (logistic or
probit), the IPO square loss and the SLiC hinge.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_ndtr, logsumexp

from .data import ObservedPair, ObservedPairs, ObservedRanking, ObservedRankings
from .env import DiscreteEnv, as_theta
from .errors import InvalidRateError, MalformedRankingError

FAMILIES = ("dpo", "cdpo", "rdpo", "ipo", "ripo", "slic", "rslic", "pl", "pl-robust")
LINKS = ("logistic", "probit")

_BASE = {"dpo": "bce", "cdpo": "bce", "rdpo": "bce", "ipo": "square", "ripo": "square",
         "slic": "hinge", "rslic": "hinge"}
_ROBUST = {"rdpo", "ripo", "rslic", "pl-robust"}
_VANILLA_OF = {"rdpo": "dpo", "cdpo": "dpo", "ripo": "ipo", "rslic": "slic",
               "pl-robust": "pl"}

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class LossSpec:
    """Loss family, link function and the flip rate the loss assumes."""

    family: str = "dpo"
    link: str = "logistic"
    eps: float = 0.0

    def __post_init__(self):
        fam = self.family.lower()
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "eps", float(self.eps))
        if fam not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}; expected one of {FAMILIES}")
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}; expected one of {LINKS}")
        if not (0.0 <= self.eps < 0.5):
            raise InvalidRateError(f"eps must lie in [0, 0.5), got {self.eps}")
        if fam not in _ROBUST and fam != "cdpo" and self.eps != 0.0:
            raise ValueError(f"family {fam!r} takes no flip rate (got eps={self.eps})")

    @property
    def ranking(self) -> bool:
        return self.family in ("pl", "pl-robust")

    @property
    def robust(self) -> bool:
        return self.family in _ROBUST

    def vanilla(self) -> "LossSpec":
        """The eps-free loss this one de-biases or smooths."""
        return LossSpec(_VANILLA_OF.get(self.family, self.family), self.link, 0.0)

    def to_dict(self) -> dict:
        return {"family": self.family, "link": self.link, "eps": self.eps}

    @classmethod
    def from_dict(cls, obj: dict) -> "LossSpec":
        return cls(obj.get("family", "dpo"), obj.get("link", "logistic"),
                   obj.get("eps", 0.0))


def check_eps(eps: float) -> float:
    eps = float(eps)
    if not (0.0 <= eps < 0.5):
        raise InvalidRateError(f"eps must lie in [0, 0.5), got {eps}")
    return eps


# -- scalar algebra on the scaled score x ------------------------------------

def neg_log_link(x, link: str = "logistic"):
    """``-log g(x)``: softplus(-x) for the logistic link, ``-log Phi(x)`` for probit."""
    x = np.asarray(x, dtype=float)
    if link == "logistic":
        return np.logaddexp(0.0, -x)
    return -log_ndtr(x)


def neg_log_link_dx(x, link: str = "logistic"):
    x = np.asarray(x, dtype=float)
    if link == "logistic":
        return -expit(-x)
    # phi(x) / Phi(x) in log space, stable for very negative x
    return -np.exp(-0.5 * x * x - _LOG_SQRT_2PI - log_ndtr(x))


def _base(kind, x, link):
    if kind == "bce":
        return neg_log_link(x, link)
    if kind == "square":
        return (x - 0.5) ** 2
    return np.maximum(0.0, 1.0 - x)


def _base_dx(kind, x, link):
    if kind == "bce":
        return neg_log_link_dx(x, link)
    if kind == "square":
        return 2.0 * (x - 0.5)
    # hinge: subgradient 0 at the kink x = 1
    return np.where(x < 1.0, -1.0, 0.0)


def margin_loss(spec: LossSpec, x):
    """Per-sample pairwise loss as a function of ``x = beta * h``."""
    kind = _BASE[spec.family]
    fwd = _base(kind, x, spec.link)
    if spec.family in ("dpo", "ipo", "slic"):
        return fwd
    e = spec.eps
    rev = _base(kind, -np.asarray(x, dtype=float), spec.link)
    if spec.family == "cdpo":
        return (1 - e) * fwd + e * rev
    if e == 0.0:
        return fwd
    return ((1 - e) * fwd - e * rev) / (1 - 2 * e)


def margin_loss_dx(spec: LossSpec, x):
    """Derivative of :func:`margin_loss` with respect to ``x``."""
    kind = _BASE[spec.family]
    fwd = _base_dx(kind, x, spec.link)
    if spec.family in ("dpo", "ipo", "slic"):
        return fwd
    e = spec.eps
    # d/dx l(-x) = -l'(-x)
    rev = -_base_dx(kind, -np.asarray(x, dtype=float), spec.link)
    if spec.family == "cdpo":
        return (1 - e) * fwd + e * rev
    if e == 0.0:
        return fwd
    return ((1 - e) * fwd - e * rev) / (1 - 2 * e)


def robust_pref_logit(x, eps: float):
    """Log-odds of the un-normalized robust preference probabilities.

    ``P(a > a') = sigma(x)^(1-eps) / sigma(-x)^eps``; the returned log-odds
    ``log P(a > a') - log P(a' > a)`` equals ``x`` for every ``eps``.
    """
    eps = check_eps(eps)
    x = np.asarray(x, dtype=float)
    log_s_pos = -np.logaddexp(0.0, -x)
    log_s_neg = -np.logaddexp(0.0, x)
    log_p_fwd = (1 - eps) * log_s_pos - eps * log_s_neg
    log_p_rev = (1 - eps) * log_s_neg - eps * log_s_pos
    return log_p_fwd - log_p_rev


# -- pairs -------------------------------------------------------------------

def _pair_diff(env: DiscreteEnv, pair):
    s, w, l = env.check_pair(pair.prompt, pair.winner, pair.loser)
    return env.features[s, w] - env.features[s, l]


def _margin(env, theta, diff):
    return env.beta * (diff @ (as_theta(theta) - env.theta_sft))


def pair_loss(spec: LossSpec, env: DiscreteEnv, theta, pair: ObservedPair) -> float:
    if spec.ranking:
        raise ValueError(f"{spec.family!r} is a ranking loss")
    x = _margin(env, theta, _pair_diff(env, pair))
    return float(margin_loss(spec, x))


def pair_loss_grad(spec: LossSpec, env: DiscreteEnv, theta, pair: ObservedPair) -> np.ndarray:
    """Gradient in theta of :func:`pair_loss`.

    For log-linear policies ``grad log pi(w|s) - grad log pi(l|s)`` is the
    feature difference, so the gradient is ``l'(x) * beta * (phi_w - phi_l)``.
    """
    if spec.ranking:
        raise ValueError(f"{spec.family!r} is a ranking loss")
    diff = _pair_diff(env, pair)
    x = _margin(env, theta, diff)
    return float(margin_loss_dx(spec, x)) * env.beta * diff


def gradient_weights(env: DiscreteEnv, theta, pair: ObservedPair, eps: float):
    """Weights ``(zeta, zeta_bar, zeta_hat)`` multiplying ``-beta (grad log pi_w - grad log pi_l)``.

    DPO, conservative and robust losses respectively, evaluated on the
    observed (possibly flipped) pair.
    """
    eps = check_eps(eps)
    x = _margin(env, theta, _pair_diff(env, pair))
    s_lw = float(expit(-x))
    s_wl = float(expit(x))
    zeta = s_lw
    zeta_bar = (1 - eps) * s_lw - eps * s_wl
    zeta_hat = ((1 - eps) * s_lw + eps * s_wl) / (1 - 2 * eps)
    return zeta, zeta_bar, zeta_hat


def rdpo_variance_closed_form(env: DiscreteEnv, theta, pair_clean: ObservedPair,
                              eps: float, link: str = "logistic") -> float:
    """``eps (1 - eps) [L(w, l) - L(l, w)]^2`` for the un-normalized robust loss."""
    eps = check_eps(eps)
    x = _margin(env, theta, _pair_diff(env, pair_clean))
    d = neg_log_link(x, link) - neg_log_link(-x, link)
    return float(eps * (1 - eps) * d * d)


def flip_expectation(spec: LossSpec, env: DiscreteEnv, theta, pair_clean: ObservedPair):
    """Exact mean and variance of a pairwise loss over the two flip outcomes.

    The label is kept with probability ``1 - eps`` and swapped with
    probability ``eps``.  The mean is of the loss as defined; the variance is
    of ``(1 - 2 eps)`` times it for robust families (the un-normalized loss)
    and of the loss itself otherwise.
    """
    eps = spec.eps
    x = _margin(env, theta, _pair_diff(env, pair_clean))
    kept = float(margin_loss(spec, x))
    swapped = float(margin_loss(spec, -x))
    mean = (1 - eps) * kept + eps * swapped
    scale = (1 - 2 * eps) if spec.robust else 1.0
    c = scale * mean
    var = (1 - eps) * (scale * kept - c) ** 2 + eps * (scale * swapped - c) ** 2
    return mean, var


def rdpo_flip_expectation(env: DiscreteEnv, theta, pair_clean: ObservedPair, eps: float,
                          link: str = "logistic"):
    return flip_expectation(LossSpec("rdpo", link, eps), env, theta, pair_clean)


# -- rankings ------------------------------------------------------------------

def _check_ranking(env: DiscreteEnv, ranking: ObservedRanking):
    s = env.check_prompt(ranking.prompt)
    acts = [env.check_action(a) for a in ranking.ranking]
    if len(acts) < 2 or len(set(acts)) != len(acts):
        raise MalformedRankingError(f"malformed ranking {ranking.ranking!r}")
    return s, acts


def _pl_scores(env, theta, s, acts):
    # implicit rewards up to a per-prompt constant, which Plackett-Luce ignores
    return env.beta * (env.features[s, acts] @ (as_theta(theta) - env.theta_sft))


def pl_neg_log_lik(scores) -> np.ndarray:
    """Plackett-Luce negative log-likelihood of orderings; last axis is rank order."""
    scores = np.asarray(scores, dtype=float)
    rev_lse = np.logaddexp.accumulate(scores[..., ::-1], axis=-1)[..., ::-1]
    return (rev_lse - scores)[..., :-1].sum(axis=-1)


def ranking_loss(spec: LossSpec, env: DiscreteEnv, theta, ranking: ObservedRanking,
                 candidates: Optional[Sequence[Sequence[int]]] = None) -> float:
    """Plackett-Luce loss of an observed ranking, optionally de-biased.

    Parameters
    ----------
    candidates : sequence of rankings, optional
        The admissible rankings the perturbation draws from.  Defaults to all
        ``K!`` orderings of the observed actions.  Must contain the observed
        ranking.
    """
    if not spec.ranking:
        raise ValueError(f"{spec.family!r} is not a ranking loss")
    s, acts = _check_ranking(env, ranking)
    if len(acts) > 5:
        raise MalformedRankingError("rankings are limited to K <= 5")
    scores = dict(zip(acts, _pl_scores(env, theta, s, acts)))
    obs = float(pl_neg_log_lik([scores[a] for a in acts]))
    if spec.family == "pl":
        return obs
    if candidates is None:
        candidates = list(itertools.permutations(acts))
    candidates = [tuple(c) for c in candidates]
    if tuple(acts) not in candidates:
        raise MalformedRankingError("observed ranking is not among the candidates")
    for c in candidates:
        if sorted(c) != sorted(acts):
            raise MalformedRankingError(f"candidate {c!r} ranks different actions")
    N = len(candidates)
    eps = spec.eps
    denom = (1 - eps) * N - 1
    if denom <= 0:
        raise InvalidRateError(f"(1 - eps) N - 1 must be positive (eps={eps}, N={N})")
    total = sum(float(pl_neg_log_lik([scores[a] for a in c])) for c in candidates)
    return ((N - 1 - eps) * obs - eps * (total - obs)) / denom


# -- batch objectives used by the trainers -------------------------------------

def pair_features(env: DiscreteEnv, obs: ObservedPairs) -> np.ndarray:
    """Feature differences ``phi(s, w) - phi(s, l)``, shape (n, d)."""
    return env.features[obs.s, obs.w] - env.features[obs.s, obs.l]


def pair_objective(spec: LossSpec, env: DiscreteEnv, diffs: np.ndarray, theta,
                   weights: Optional[np.ndarray] = None):
    """Mean loss and its gradient over precomputed feature differences.

    ``weights`` (summing to one) turns the mean into a weighted mean, which
    lets repeated records be stored once.
    """
    x = env.beta * (diffs @ (as_theta(theta) - env.theta_sft))
    if weights is None:
        weights = np.full(len(x), 1.0 / len(x))
    loss = margin_loss(spec, x)
    g = margin_loss_dx(spec, x)
    return float(weights @ loss), env.beta * ((weights * g) @ diffs)


class RankingBatch:
    """Precomputed tensors for the Plackett-Luce objectives over a dataset."""

    def __init__(self, env: DiscreteEnv, obs: ObservedRankings,
                 weights: Optional[np.ndarray] = None):
        self.feats = env.features[obs.s[:, None], obs.rank]     # (n, K, d)
        n, K = obs.rank.shape
        self.perms = np.array(list(itertools.permutations(range(K))), dtype=np.int64)
        self.weights = np.full(n, 1.0 / n) if weights is None else np.asarray(weights)

    def smoothness(self, spec: LossSpec, beta: float) -> float:
        """Bound on the gradient's Lipschitz constant.

        Each Plackett-Luce stage contributes a softmax covariance, which is
        at most a quarter of the sum of pairwise outer products of the
        remaining feature differences.
        """
        n, K, d = self.feats.shape
        M = np.zeros((d, d))
        for i, j in itertools.combinations(range(K), 2):
            D = self.feats[:, i] - self.feats[:, j]
            M += (self.weights[:, None] * D).T @ D
        scale = 1.0
        if spec.family == "pl-robust":
            N = len(self.perms)
            scale = (N - 1 + spec.eps * N) / ((1 - spec.eps) * N - 1)
        return max(scale * beta ** 2 * (K - 1) / 4 * np.linalg.eigvalsh(M)[-1], 1e-12)

    def objective(self, spec: LossSpec, env: DiscreteEnv, theta):
        delta = as_theta(theta) - env.theta_sft
        scores = env.beta * (self.feats @ delta)                # (n, K)
        n, K = scores.shape
        if spec.family == "pl":
            loss = pl_neg_log_lik(scores)
            coef = _pl_score_grad(scores)
        else:
            N = len(self.perms)
            eps = spec.eps
            denom = (1 - eps) * N - 1
            if denom <= 0:
                raise InvalidRateError(f"(1 - eps) N - 1 must be positive (eps={eps}, N={N})")
            permuted = scores[:, self.perms]                    # (n, N, K)
            all_loss = pl_neg_log_lik(permuted)                 # (n, N); column 0 = observed
            loss = ((N - 1) * all_loss[:, 0] - eps * all_loss.sum(axis=1)) / denom
            d_perm = _pl_score_grad(permuted)                   # (n, N, K)
            # scatter permuted-position gradients back to observed positions
            back = np.zeros((n, N, K))
            np.put_along_axis(back, np.broadcast_to(self.perms, (n, N, K)), d_perm, axis=2)
            coef = ((N - 1) * back[:, 0] - eps * back.sum(axis=1)) / denom
        grad = env.beta * np.einsum("nk,nkd->d", self.weights[:, None] * coef, self.feats)
        return float(self.weights @ loss), grad


def _pl_score_grad(scores):
    """d(PL loss)/d(scores) along the last axis."""
    K = scores.shape[-1]
    out = -np.ones_like(scores)
    out[..., -1] = 0.0
    for j in range(K - 1):
        tail = scores[..., j:]
        p = np.exp(tail - logsumexp(tail, axis=-1, keepdims=True))
        out[..., j:] += p
    return out
