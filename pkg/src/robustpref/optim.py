"""Empirical risk minimization over the constrained parameter set.

The feasible set is ``Theta_B = {theta : sum(theta) = 0, ||theta|| <= B}``.
Two trainers are provided: full-batch projected gradient descent (the
reference) and single-pass projected per-sample SGD.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from . import rng
from .data import ObservedPairs, ObservedRankings, PreferenceDataset
from .env import DiscreteEnv, PolicyParams, as_theta
from .errors import CoverageError, DivergedError, KindMismatchError, NumericRangeError
from .losses import (
    LossSpec,
    RankingBatch,
    margin_loss,
    margin_loss_dx,
    pair_features,
    pair_objective,
)


@dataclass(frozen=True)
class ConstantLR:
    """Constant step ``eta``; ``None`` picks ``1 / smoothness`` of the empirical loss."""

    eta: Optional[float] = None


@dataclass(frozen=True)
class InverseLR:
    """Step ``c / (lam * t)``; ``lam=None`` uses ``gamma beta^2 (1 - 2 eps) kappa_cov``."""

    c: float = 1.0
    lam: Optional[float] = None


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    bound_B: float = 10.0
    steps: Optional[int] = None
    lr: Union[ConstantLR, InverseLR] = field(default_factory=ConstantLR)
    batch: str = "full"
    init: Optional[tuple] = None
    seed: int = 0
    tol: float = 1e-10
    epochs: int = 1
    alpha0: Optional[float] = None

    def __post_init__(self):
        if self.bound_B <= 0:
            raise ValueError("bound_B must be positive")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch not in ("full", "per-sample"):
            raise ValueError("batch must be 'full' or 'per-sample'")
        if isinstance(self.lr, ConstantLR):
            if self.lr.eta is not None and self.lr.eta <= 0:
                raise ValueError("eta must be positive")
        elif isinstance(self.lr, InverseLR):
            if self.lr.c <= 0 or (self.lr.lam is not None and self.lr.lam <= 0):
                raise ValueError("c and lam must be positive")
        else:
            raise TypeError("lr must be ConstantLR or InverseLR")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.init is not None:
            object.__setattr__(self, "init", tuple(float(v) for v in self.init))

    def to_dict(self) -> dict:
        if isinstance(self.lr, ConstantLR):
            lr = {"mode": "constant", "eta": self.lr.eta}
        else:
            lr = {"mode": "inverse", "c": self.lr.c, "lam": self.lr.lam}
        return {
            "loss": self.loss.to_dict(), "bound_B": self.bound_B, "steps": self.steps,
            "lr": lr, "batch": self.batch,
            "init": None if self.init is None else list(self.init),
            "seed": self.seed, "tol": self.tol, "epochs": self.epochs,
            "alpha0": self.alpha0,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        lr = obj.pop("lr", None) or {"mode": "constant"}
        if isinstance(lr, (int, float)):
            lr = {"mode": "constant", "eta": lr}
        if lr.get("mode", "constant") == "constant":
            lr = ConstantLR(lr.get("eta"))
        else:
            lr = InverseLR(lr.get("c", 1.0), lr.get("lam"))
        loss = LossSpec.from_dict(obj.pop("loss", {}))
        known = {k: obj[k] for k in ("bound_B", "steps", "batch", "init", "seed", "tol",
                                     "epochs", "alpha0") if k in obj}
        return cls(loss=loss, lr=lr, **known)


@dataclass
class Trace:
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)

    def append(self, t, loss, gnorm):
        self.step.append(int(t))
        self.loss.append(float(loss))
        self.grad_norm.append(float(gnorm))

    def __len__(self):
        return len(self.step)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow(["step", "loss", "grad_norm"])
            for row in zip(self.step, self.loss, self.grad_norm):
                out.writerow([row[0], repr(row[1]), repr(row[2])])


def project(theta_raw, B: float) -> PolicyParams:
    """Euclidean projection onto ``{sum(theta) = 0} ∩ {||theta|| <= B}``.

    The hyperplane passes through the centre of the ball, so projecting onto
    the hyperplane and then radially onto the ball is exact.
    """
    if B <= 0:
        raise ValueError("B must be positive")
    theta = np.array(as_theta(theta_raw), dtype=float)
    if not np.all(np.isfinite(theta)):
        raise NumericRangeError("cannot project a non-finite parameter")
    theta -= theta.mean()
    norm = np.linalg.norm(theta)
    if norm > B:
        theta *= B / norm
    return PolicyParams(theta, B)


def gamma_const(beta: float, alpha0: float) -> float:
    """Curvature floor ``1 / (2 + exp(-4 beta alpha0) + exp(4 beta alpha0))``."""
    if beta <= 0 or alpha0 < 0:
        raise ValueError("need beta > 0 and alpha0 >= 0")
    z = 4.0 * beta * alpha0
    if z > 700:
        warnings.warn(f"gamma underflows to 0 (4 beta alpha0 = {z:.1f})", RuntimeWarning)
        return 0.0
    return 1.0 / (2.0 + math.exp(-z) + math.exp(z))


def _curvature(spec: LossSpec) -> float:
    # bound on the second derivative of the per-sample loss in x = beta h
    fam = spec.family
    if fam in ("ipo", "ripo"):
        return 2.0
    if fam in ("slic", "rslic"):
        return 1.0
    if spec.link == "probit":
        return 1.0 / (1.0 - 2.0 * spec.eps) if fam == "rdpo" else 1.0
    return 0.25


def compress(obs):
    """Merge repeated records; returns ``(unique observations, weights)``.

    Weights are multiplicities over ``n``, so weighted means over the unique
    records equal plain means over the original ones.
    """
    if isinstance(obs, ObservedRankings):
        table = np.column_stack([obs.s, obs.rank])
    else:
        table = np.column_stack([obs.s, obs.w, obs.l])
    uniq, counts = np.unique(table, axis=0, return_counts=True)
    weights = counts / counts.sum()
    if isinstance(obs, ObservedRankings):
        return ObservedRankings(uniq[:, 0], uniq[:, 1:]), weights
    return ObservedPairs(uniq[:, 0], uniq[:, 1], uniq[:, 2]), weights


def smoothness(spec: LossSpec, env: DiscreteEnv, obs, weights=None) -> float:
    """Upper bound on the Lipschitz constant of the empirical-loss gradient."""
    if isinstance(obs, ObservedRankings):
        return RankingBatch(env, obs, weights).smoothness(spec, env.beta)
    D = pair_features(env, obs)
    if len(D) == 0:
        return 1e-12
    w = np.full(len(D), 1.0 / len(D)) if weights is None else weights
    top = np.linalg.eigvalsh((w[:, None] * D).T @ D)[-1]
    return max(_curvature(spec) * env.beta ** 2 * top, 1e-12)


def _observed(ds):
    return ds.observed() if isinstance(ds, PreferenceDataset) else ds


def make_objective(spec: LossSpec, env: DiscreteEnv, obs, weights=None) -> Callable:
    """``theta -> (mean loss, gradient)`` for a redacted dataset."""
    if isinstance(obs, ObservedRankings):
        if not spec.ranking:
            raise KindMismatchError(f"loss {spec.family!r} needs pairwise data")
        batch = RankingBatch(env, obs, weights)
        return lambda theta: batch.objective(spec, env, theta)
    if spec.ranking:
        raise KindMismatchError(f"loss {spec.family!r} needs ranking data")
    diffs = pair_features(env, obs)
    return lambda theta: pair_objective(spec, env, diffs, theta, weights)


def projected_gd(objective: Callable, init, B: float, eta: float, steps: int,
                 tol: float) -> tuple:
    """Projected gradient descent; stops when the projected-gradient norm < ``tol``."""
    theta = project(init, B).theta
    trace = Trace()
    for t in range(steps):
        # non-finite values are reported as divergence below
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = objective(theta)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergedError(t)
        with np.errstate(over="ignore", invalid="ignore"):
            raw = theta - eta * grad
        if not np.all(np.isfinite(raw)):
            raise DivergedError(t)
        nxt = project(raw, B).theta
        gnorm = float(np.linalg.norm(theta - nxt) / eta)
        trace.append(t, loss, gnorm)
        theta = nxt
        if gnorm < tol:
            break
    return PolicyParams(theta, B), trace


def _init(cfg: TrainConfig, env: DiscreteEnv):
    return np.zeros(env.dim) if cfg.init is None else np.array(cfg.init)


def train_full_batch(ds, env: DiscreteEnv, cfg: TrainConfig):
    """Minimize the empirical mean loss by full-batch projected gradient descent.

    Returns ``(theta_hat, trace)``.  The step is ``cfg.lr.eta`` or, when that
    is ``None``, the inverse of :func:`smoothness`.
    """
    obs = _observed(ds)
    if len(obs) == 0:
        raise ValueError("dataset is empty")
    obs, weights = compress(obs)
    objective = make_objective(cfg.loss, env, obs, weights)
    if not isinstance(cfg.lr, ConstantLR):
        raise ValueError("full-batch training uses a constant step")
    eta = cfg.lr.eta or 1.0 / smoothness(cfg.loss, env, obs, weights)
    steps = 5000 if cfg.steps is None else cfg.steps
    return projected_gd(objective, _init(cfg, env), cfg.bound_B, eta, steps, cfg.tol)


def inverse_schedule_lambda(env: DiscreteEnv, cfg: TrainConfig) -> float:
    """``gamma beta^2 (1 - 2 eps) kappa_cov`` with ``alpha0 = L B`` unless configured."""
    from .metrics import kappa_cov

    kc = kappa_cov(env)
    if kc <= 1e-12:
        raise CoverageError(
            "feature-difference covariance is singular (kappa_cov <= 0); "
            "use a constant step (ConstantLR) instead of the inverse schedule")
    alpha0 = cfg.alpha0 if cfg.alpha0 is not None else env.feature_bound * cfg.bound_B
    gamma = gamma_const(env.beta, alpha0)
    eps = cfg.loss.eps if cfg.loss.robust else 0.0
    return gamma * env.beta ** 2 * (1 - 2 * eps) * kc


def train_sgd(ds, env: DiscreteEnv, cfg: TrainConfig):
    """Projected per-sample SGD, ``theta_{t+1} = Proj(theta_t - eta_t g_t)``.

    ``g_t`` is the per-sample gradient of the configured loss, scaled by
    ``1 - 2 eps`` for robust families so that its expectation over flips is
    ``(1 - 2 eps)`` times the clean gradient.  Records are visited in a
    seeded random order, ``cfg.epochs`` times; ``cfg.steps`` caps the total
    number of updates.
    """
    obs = _observed(ds)
    if isinstance(obs, ObservedRankings) or cfg.loss.ranking:
        raise KindMismatchError("per-sample SGD is implemented for pairwise losses")
    n = len(obs)
    if n == 0:
        raise ValueError("dataset is empty")
    spec = cfg.loss
    scale = (1 - 2 * spec.eps) if spec.robust else 1.0
    if isinstance(cfg.lr, InverseLR):
        lam = cfg.lr.lam if cfg.lr.lam is not None else inverse_schedule_lambda(env, cfg)
        step_size = lambda t: cfg.lr.c / (lam * t)   # noqa: E731
    else:
        eta = cfg.lr.eta or 1.0 / smoothness(spec, env, *compress(obs))
        step_size = lambda t: eta                      # noqa: E731

    diffs = env.beta * pair_features(env, obs)
    theta = project(_init(cfg, env), cfg.bound_B).theta
    total = cfg.epochs * n if cfg.steps is None else min(cfg.steps, cfg.epochs * n)
    trace = Trace()
    t = 0
    B = cfg.bound_B
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(rng.derive_seed(cfg.seed, epoch)).permutation(n)
        for i in order:
            if t >= total:
                break
            t += 1
            xi = diffs[i]
            x = float(xi @ (theta - env.theta_sft))
            loss = float(margin_loss(spec, x))
            if not np.isfinite(loss):
                raise DivergedError(t)
            g = (scale * float(margin_loss_dx(spec, x))) * xi
            with np.errstate(over="ignore", invalid="ignore"):
                theta = theta - step_size(t) * g
            if not np.all(np.isfinite(theta)):
                raise DivergedError(t)
            theta -= theta.mean()
            norm = math.sqrt(float(theta @ theta))
            if norm > B:
                theta *= B / norm
            trace.append(t, loss, math.sqrt(float(g @ g)))
    return project(theta, B), trace


def train(ds, env: DiscreteEnv, cfg: TrainConfig):
    """Dispatch on ``cfg.batch``."""
    if cfg.batch == "per-sample":
        return train_sgd(ds, env, cfg)
    return train_full_batch(ds, env, cfg)
