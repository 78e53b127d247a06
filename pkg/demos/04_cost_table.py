"""Closed-loop cost statistics under random disturbances.

Each controller solves once at x0 and its optimised feedback policy is then
applied over the horizon for many uniformly drawn disturbance sequences.
The same seed gives every controller the same sequences.
"""
import sys

import numpy as np

from sltube import min_tightening_gain, benchmark_problem
from sltube.sim import monte_carlo

RUNS = int(sys.argv[1]) if len(sys.argv) > 1 else 200
prob = benchmark_problem(0.05)
x0 = np.array([-0.9, 0.0])
K = min_tightening_gain(prob)

print(f"{'controller':10s} {'mean':>8s} {'std':>7s} {'violations':>10s}")
for kind in ("df", "sltmpc", "tube"):
    r = monte_carlo(kind, prob, x0, n_runs=RUNS, seed=7, K=K if kind == "tube" else None)
    print(f"{kind:10s} {r.mean_cost:8.2f} {r.std_cost:7.2f} {r.violations:10d}")
