"""Closed-loop maps instead of gains.

A block-lower-triangular feedback K on the stacked horizon fixes two maps,
phi_x and phi_u, from delta = [x0; w] to the state and input trajectories.
Going back from the maps to K is exact, and a disturbance-feedback policy
u = M w + v can be rewritten as such a pair.  This script walks through both
directions on the benchmark double integrator.
"""
import numpy as np

from sltube import slp
from sltube.horizon import LtiSystem, build_horizon_operators

A = np.array([[1.0, 0.15], [0.0, 1.0]])
B = np.array([[0.5], [0.5]])
N = 6
ops = build_horizon_operators(LtiSystem(A, B), N)
rng = np.random.default_rng(0)

# A constant gain, lifted to the whole horizon.
K = np.kron(np.eye(N + 1), [[-0.6, -0.8]])
resp = slp.response_from_controller(ops, K)
print("achievability residual of the gain's response:",
      f"{slp.subspace_residual(ops, resp):.1e}")
back = slp.controller_from_response(ops, resp).gains
print("gain recovered from the maps, max error:", f"{np.max(np.abs(back - K)):.1e}")

# A constant gain gives block-Toeplitz maps, so only N+1 blocks are free.
tr = slp.toeplitz_from_gain(ops.sys, [[-0.6, -0.8]], N)
print("Toeplitz expansion equals the dense response:",
      np.allclose(slp.toeplitz_expand(tr).phi_x, resp.phi_x))

# Disturbance feedback u = M w + v, rewritten as a response and replayed.
M = np.zeros(((N + 1), N * 2))
for i in range(1, N + 1):
    M[i, : 2 * i] = 0.2 * rng.normal(size=2 * i)
v = rng.normal(size=N + 1)
x0 = np.array([-0.9, 0.0])
w = rng.uniform([-0.05, -0.1], [0.05, 0.1], size=(N, 2)).ravel()
x_df, u_df = slp.df_rollout(ops, M, v, x0, w)
x_sl, u_sl = slp.df_to_slp(ops, M, v, x0).apply(np.r_[x0, w])
print("df policy vs its response, trajectory gap:",
      f"{max(np.max(np.abs(x_df - x_sl)), np.max(np.abs(u_df - u_sl))):.1e}")

# An affine response splits into a nominal part and an error part.
phi_v = 0.1 * rng.normal(size=N + 1)
phi_z, _ = slp.nominal_offsets(ops, phi_v)
ar = slp.AffineResponse.from_toeplitz(tr, phi_z, phi_v)
_, _, res = slp.verify_decoupling(ops, ar, w, x0)
print("nominal / error decoupling residuals:", {k: f"{r:.1e}" for k, r in res.items()})
