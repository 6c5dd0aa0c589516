"""Noise-robust preference optimization on exactly solvable discrete environments."""

from .data import (
    ObservedPair,
    ObservedRanking,
    PreferenceDataset,
    flip_pairs,
    load_dataset,
    perturb_rankings,
    sample_pairs,
    sample_rankings,
    save_dataset,
)
from .env import (
    DiscreteEnv,
    PolicyParams,
    implicit_reward,
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
from .errors import *  # noqa: F401,F403
from .losses import (
    LossSpec,
    gradient_weights,
    pair_loss,
    pair_loss_grad,
    ranking_loss,
    rdpo_flip_expectation,
    rdpo_variance_closed_form,
)
from .metrics import (
    MetricsReport,
    eval_accuracy,
    evaluate,
    expected_kl,
    kappa_rel_bound,
    margin_and_gap,
    pop_cov,
    sample_complexity,
    sample_cov_diff,
    subopt_gap,
    estimation_error,
)
from .optim import ConstantLR, InverseLR, TrainConfig, gamma_const, project, train, \
    train_full_batch, train_sgd
from .reward import RewardParams, policy_from_reward, reward_pair_loss, train_reward

__version__ = "0.1.0"
