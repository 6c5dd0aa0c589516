"""
Rankings of K answers
=====================

Plackett-Luce generalizes the pairwise model to rankings.  A perturbed
ranking is replaced by any of the other K! - 1 orderings; the robust loss
averages back to the clean one.
"""

import numpy as np

from robustpref import LossSpec, TrainConfig, random_env, train
from robustpref.data import perturb_rankings, sample_rankings
from robustpref.harness import flip_seed

env = random_env(4, 6, 5, seed=3, reward_scale=1.5)
clean = sample_rankings(env, 4000, K=3, seed=0)
noisy = perturb_rankings(clean, 0.3, flip_seed(0))
print("first rankings:", noisy.rank[:3].tolist())
print("fraction perturbed:", np.mean(np.any(noisy.rank != noisy.crank, axis=1)))

for spec in (LossSpec("pl"), LossSpec("pl-robust", eps=0.3)):
    theta, _ = train(noisy, env, TrainConfig(loss=spec))
    print(f"{spec.family:9s} l2 error {np.linalg.norm(theta.theta - env.theta_opt):.3f}")
