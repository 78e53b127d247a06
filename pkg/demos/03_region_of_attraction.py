"""Where each controller can start, as a text map.

Every cell centre of a grid over X gets one feasibility solve.  '#' marks
states feasible for tube MPC (and therefore for SLTMPC), '+' states only
SLTMPC handles, '.' the rest.  Raise RES for a finer picture; the
acceptance tests use 50.
"""
import sys

import numpy as np

from sltube import min_tightening_gain, benchmark_problem
from sltube.sim import roa_estimate

RES = int(sys.argv[1]) if len(sys.argv) > 1 else 16

for theta in (0.05, 0.1, 0.12):
    prob = benchmark_problem(theta)
    tube = roa_estimate("tube", prob, RES, K=min_tightening_gain(prob))
    sl = roa_estimate("sltmpc", prob, RES)
    print(f"\ntheta = {theta}: tube {tube.coverage_percent:.1f} %, "
          f"SLTMPC {sl.coverage_percent:.1f} %")
    ft = tube.feasible.reshape(RES, RES)
    fs = sl.feasible.reshape(RES, RES)
    # centres come out x1-major; print x2 upwards
    for j in reversed(range(RES)):
        print("  " + "".join("#" if ft[i, j] else "+" if fs[i, j] else "."
                             for i in range(RES)))
    assert not np.any(ft & ~fs)
