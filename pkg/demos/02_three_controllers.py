"""One solve of each robust MPC formulation on the benchmark.

Disturbance feedback optimises a full lower-triangular M, the fixed-gain
tube uses offline tightening, and the system level tube optimises a
Toeplitz tube controller online.  At the same initial state the optimal
nominal costs are ordered df <= SLTMPC <= tube.

The SLTMPC row registers 99 policy variables: N+1 Toeplitz blocks of the
state and input maps plus the nominal offsets.  The closed-form count it is
printed next to is twice that.
"""
import numpy as np

from sltube import MpcController, min_tightening_gain, benchmark_problem, policy_parameter_counts
from sltube.controllers import lqr_gain, policy_variable_count

prob = benchmark_problem(theta=0.05)
x0 = np.array([-0.9, 0.0])
K = min_tightening_gain(prob)
print("LQR gain          ", np.round(lqr_gain(prob.sys, prob.Q, prob.R), 4))
print("min-tightening gain", np.round(K, 4))

for kind in ("df", "sltmpc", "tube"):
    ctrl = MpcController(prob, kind, K=K if kind == "tube" else None)
    res = ctrl.solve(x0)
    spec = res.spec
    print(f"{kind:7s} {res.status.value:9s} cost {res.objective:8.4f}  "
          f"u0 {res.first_input[0]: .4f}  "
          f"policy vars {policy_variable_count(ctrl.var_map, kind):4d} "
          f"(closed form {policy_parameter_counts(kind, 2, 1, prob.N):3d})  "
          f"QP vars {spec.nvar:5d}  eq {spec.eq_b.size:5d}  ineq {spec.ineq_b.size:5d}")

# The LQR gain tightens too much to start from this state.
print("tube with LQR gain:", MpcController(prob, "tube").solve(x0).status.value)
