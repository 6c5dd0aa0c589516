"""
Label flips bias DPO, the de-biased loss is consistent
=======================================================

A single prompt with eight actions whose latent rewards sit on a ladder.
We draw preference pairs from the SFT policy, flip 40% of the labels and
train the log-linear policy with plain DPO and with the de-biased loss.
"""

import numpy as np

from robustpref import LossSpec, TrainConfig, flip_pairs, sample_pairs, tabular_env, train
from robustpref.harness import flip_seed

env = tabular_env([np.linspace(-1.5, 1.5, 8)])
print("optimal parameter:", np.round(env.theta_opt, 3))

# %%
# The noisy data.  ``flip_seed`` keeps the flips independent of the pair draws.
eps = 0.4
for n in (1024, 16384):
    ds = flip_pairs(sample_pairs(env, n, seed=0), eps, flip_seed(0))
    print(f"\nn = {n}: {ds.flip.mean():.3f} of the labels flipped")
    for spec in (LossSpec("dpo"), LossSpec("cdpo", eps=eps), LossSpec("rdpo", eps=eps)):
        theta, trace = train(ds, env, TrainConfig(loss=spec))
        err = np.linalg.norm(theta.theta - env.theta_opt)
        print(f"  {spec.family:5s} l2 error {err:6.3f} after {len(trace)} steps")

# %%
# DPO and the label-smoothed variant shrink the parameter towards zero: more
# data does not help.  The de-biased loss keeps improving with n.
