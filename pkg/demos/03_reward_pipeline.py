"""
Reward model first, then the KL-regularized policy
===================================================

Instead of fitting the policy directly we can fit a linear reward with the
same losses and plug it into pi(a|s) ∝ pi_sft(a|s) exp(r(s, a) / beta).
On a finite action set that policy is exact, so no RL loop is needed.
"""

import numpy as np

from robustpref import LossSpec, TrainConfig, flip_pairs, sample_pairs, tabular_env
from robustpref.harness import flip_seed
from robustpref.metrics import subopt_gap
from robustpref.reward import angle, policy_from_reward, train_reward

rewards = np.array([-8.0, 0.0, 0.5, 1.0])
env = tabular_env([rewards])
truth = rewards - rewards.mean()

ds = flip_pairs(sample_pairs(env, 16384, seed=1), 0.4, flip_seed(1))
for spec in (LossSpec("dpo"), LossSpec("rdpo", eps=0.4)):
    xi, _ = train_reward(ds, env, TrainConfig(loss=spec))
    pi = policy_from_reward(env, xi.xi)
    print(f"{spec.family:5s} reward {np.round(xi.xi, 2)}  angle to truth "
          f"{angle(xi.xi, truth):.3f} rad  gap {subopt_gap(env, pi):+.4f}")

# %%
# The flipped labels cap every win rate at 60%, so the vanilla fit squashes
# the large reward gaps much more than the small ones and its direction
# drifts.  The robust fit keeps the shape of the reward.
