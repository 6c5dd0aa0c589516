"""
Sweeps, CSV rows and the log-log slope
======================================

The harness runs one training job per (method, eps_true, eps_assumed, n,
seed) cell and returns CSV-ready rows.  Fitting ln(median error) on ln(n)
recovers the square-root rate.
"""

import numpy as np

from robustpref import tabular_env
from robustpref.harness import Method, SweepConfig, run_sweep, slope_from_rows, write_rows

env = tabular_env([np.linspace(-1.5, 1.5, 8)])
cfg = SweepConfig(methods=(Method("rdpo"),), eps_true=(0.3,), n=(256, 1024, 4096, 16384),
                  seeds=tuple(range(10)))
rows = run_sweep(cfg, env)
write_rows(rows, "sweep.csv")
print(len(rows), "rows written to sweep.csv")

# %%
# Rows are plain dicts; columns follow a fixed order.
for n in cfg.n:
    errs = [r["l2_error"] for r in rows if r["n"] == n]
    print(f"n = {n:5d}: median l2 error {np.median(errs):.3f}")

res = slope_from_rows(rows, x="n", y="l2_error", n_boot=200)
print(f"slope {res.slope:.3f}, bootstrap interval [{res.ci_low:.3f}, {res.ci_high:.3f}]")

# %%
# The same sweep from the shell:
#
#   python -m robustpref gen-env --kind tabular --rewards "[[-1.5,-1.07,-0.64,-0.21,0.21,0.64,1.07,1.5]]" --out env.json
#   python -m robustpref sweep --env env.json --methods rdpo --eps-true 0.3 \
#       --n 256,1024,4096,16384 --seeds 0,1,2,3,4,5,6,7,8,9 --output sweep.csv
#   python -m robustpref slope --csv sweep.csv
