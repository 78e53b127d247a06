"""Randomised certification of the structural identities the toolkit relies on.

Each property draws seeded random instances, computes a worst-case residual
and compares it with a fixed tolerance.  ``run_suite`` returns one
:class:`PropertyResult` per property; the CLI ``verify`` command prints them.

Setting ``SLTUBE_INJECT_FAULT=response_from_controller`` flips the sign of
the input response returned by that function.  It exists so tests can check
that the suite actually detects a broken implementation.
"""
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import slp
from .config import EQUALITY_TOL, STRUCTURAL_TOL
from .horizon import LtiSystem, build_horizon_operators, neumann_identity_residual
from .polytope import Polytope, box, cartesian_power
from .robustify import RobustRow, certify_equivalence

FAULT_ENV = "SLTUBE_INJECT_FAULT"
TRAJ_TOL = 1e-9
TIGHTEN_TOL = 1e-6


@dataclass
class PropertyResult:
    name: str
    passed: bool
    max_residual: float
    tol: float
    trials: int
    seconds: float = 0.0
    counterexample: Optional[Dict] = None

    def line(self):
        mark = "PASS" if self.passed else "FAIL"
        return (f"{mark}  {self.name:<34} max residual {self.max_residual:.3e} "
                f"(tol {self.tol:.0e}, {self.trials} trials)")


def _response_from_controller(ops, K):
    resp = slp.response_from_controller(ops, K)
    if os.environ.get(FAULT_ENV) == "response_from_controller":
        return slp.SystemResponse(resp.phi_x, -resp.phi_u)
    return resp


# ----------------------------------------------------------------- random instances


def random_system(rng, n_max=4, m_max=3, N_max=8):
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    N = int(rng.integers(2, N_max + 1))
    A = rng.normal(size=(n, n))
    A *= rng.uniform(0.5, 1.1) / max(1e-9, max(abs(np.linalg.eigvals(A))))
    B = rng.normal(size=(n, m))
    return build_horizon_operators(LtiSystem(A, B), N)


def random_blt(rng, ops, scale=0.3, strict=False):
    n, m, N = ops.n, ops.m, ops.N
    K = np.zeros(((N + 1) * m, (N + 1) * n))
    for i in range(N + 1):
        for j in range(i if strict else i + 1):
            K[i * m:(i + 1) * m, j * n:(j + 1) * n] = scale * rng.normal(size=(m, n))
    return K


def _scaled_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


# ----------------------------------------------------------------- properties


def _run(name, tol, trials, seed, fn) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst, bad = 0.0, None
    t0 = time.perf_counter()
    for t in range(trials):
        try:
            r, info = fn(rng)
        except Exception as exc:  # a raised check counts as a failure
            r, info = np.inf, {"error": f"{type(exc).__name__}: {exc}"}
        if not np.isfinite(r) or r > worst:
            worst = r if np.isfinite(r) else np.inf
            if r > tol and bad is None:
                bad = {"trial": t, **info}
        if not np.isfinite(r):
            break
    return PropertyResult(name, worst <= tol, worst, tol, trials,
                          time.perf_counter() - t0, bad)


def _info(ops, **kw):
    d = {"n": ops.n, "m": ops.m, "N": ops.N,
         "A": ops.sys.A.tolist(), "B": ops.sys.B.tolist()}
    d.update({k: np.asarray(v).tolist() for k, v in kw.items()})
    return d


def p_neumann(rng):
    ops = random_system(rng)
    return neumann_identity_residual(ops), _info(ops)


def p_subspace(rng):
    ops = random_system(rng)
    K = random_blt(rng, ops)
    resp = _response_from_controller(ops, K)
    return slp.subspace_residual(ops, resp), _info(ops, K=K)


def p_round_trip(rng):
    ops = random_system(rng)
    K = random_blt(rng, ops)
    resp = _response_from_controller(ops, K)
    back = slp.controller_from_response(ops, resp).gains
    return _scaled_err(back, K), _info(ops, K=K)


def p_inputs(rng):
    ops = random_system(rng)
    phi_u = random_blt(rng, ops, scale=1.0)
    return slp.subspace_residual(ops, slp.response_from_inputs(ops, phi_u)), _info(ops)


def p_df_to_slp(rng):
    ops = random_system(rng)
    n, m, N = ops.n, ops.m, ops.N
    M = random_blt(rng, ops, strict=True)[:, n:]
    v = rng.normal(size=(N + 1) * m)
    x0 = rng.normal(size=n)
    w = rng.uniform(-1, 1, size=N * n)
    x_df, u_df = slp.df_rollout(ops, M, v, x0, w)
    resp = slp.df_to_slp(ops, M, v, x0)
    x_s, u_s = resp.apply(np.concatenate([x0, w]))
    return max(_scaled_err(x_s, x_df), _scaled_err(u_s, u_df)), _info(ops, x0=x0)


def p_slp_to_df(rng):
    ops = random_system(rng)
    n, N = ops.n, ops.N
    resp = slp.response_from_inputs(ops, random_blt(rng, ops))
    x0 = rng.normal(size=n)
    w = rng.uniform(-1, 1, size=N * n)
    M, v = slp.slp_to_df(ops, resp, x0)
    x_df, u_df = slp.df_rollout(ops, M, v, x0, w)
    x_s, u_s = resp.apply(np.concatenate([x0, w]))
    return max(_scaled_err(x_df, x_s), _scaled_err(u_df, u_s)), _info(ops, x0=x0)


def p_toeplitz(rng):
    ops = random_system(rng)
    n, m, N = ops.n, ops.m, ops.N
    K = 0.3 * rng.normal(size=(m, n))
    tr = slp.toeplitz_from_gain(ops.sys, K, N)
    r1 = slp.toeplitz_recursion_residual(ops.sys, tr)
    r2 = slp.subspace_residual(ops, slp.toeplitz_expand(tr))
    return max(r1, r2), _info(ops, K=K)


def _random_affine(rng, ops):
    n, m, N = ops.n, ops.m, ops.N
    xb = [np.eye(n)]
    ub = [0.3 * rng.normal(size=(m, n)) for _ in range(N)] + [np.zeros((m, n))]
    for k in range(N):
        xb.append(ops.sys.A @ xb[k] + ops.sys.B @ ub[k])
    tr = slp.ToeplitzResponse(np.array(xb), np.array(ub))
    phi_v = rng.normal(size=(N + 1) * m)
    phi_z, _ = slp.nominal_offsets(ops, phi_v)
    return slp.AffineResponse.from_toeplitz(tr, phi_z, phi_v)


def p_affine(rng):
    ops = random_system(rng)
    ar = _random_affine(rng, ops)
    r = slp.affine_subspace_residual(ops, ar)
    ctrl = slp.affine_controller_recovery(ops, ar)
    x0 = rng.normal(size=ops.n)
    w = rng.uniform(-1, 1, size=ops.N * ops.n)
    x, u = slp.rollout_controller(ops.sys, ctrl, x0, w)
    xa, ua = ar.apply(ops, np.concatenate([x0, w]))
    return max(r, _scaled_err(x, xa), _scaled_err(u, ua)), _info(ops, x0=x0)


def p_decoupling(rng):
    ops = random_system(rng)
    ar = _random_affine(rng, ops)
    x0 = rng.normal(size=ops.n)
    w = rng.uniform(-1, 1, size=ops.N * ops.n)
    _, _, res = slp.verify_decoupling(ops, ar, w, x0)
    return max(res.values()), _info(ops, x0=x0)


def _random_polytope(rng, d):
    if rng.random() < 0.5:
        lo = -rng.uniform(0.1, 1.0, d)
        return box(lo, lo + rng.uniform(0.2, 2.0, d))
    H = rng.normal(size=(2 * d + 2, d))
    return Polytope(np.vstack([H, np.eye(d), -np.eye(d)]),
                    np.r_[rng.uniform(0.2, 1.0, 2 * d + 2), np.ones(2 * d)])


def p_tightening(rng):
    d = int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    W = _random_polytope(rng, d)
    rows = [RobustRow.numeric(rng.normal(size=d * k), 1.0) for _ in range(3)]
    return certify_equivalence(rows, cartesian_power(W, k), [W] * k), {"d": d, "blocks": k}


PROPERTIES: List[tuple] = [
    ("horizon.neumann_identity", STRUCTURAL_TOL, 100, p_neumann),
    ("response.subspace_residual", STRUCTURAL_TOL, 100, p_subspace),
    ("response.round_trip", STRUCTURAL_TOL, 100, p_round_trip),
    ("response.input_parameterization", STRUCTURAL_TOL, 100, p_inputs),
    ("df.to_response", TRAJ_TOL, 100, p_df_to_slp),
    ("df.from_response", TRAJ_TOL, 100, p_slp_to_df),
    ("toeplitz.recursion", STRUCTURAL_TOL, 100, p_toeplitz),
    ("affine.recovery", STRUCTURAL_TOL, 100, p_affine),
    ("affine.decoupling", STRUCTURAL_TOL, 100, p_decoupling),
    ("robustify.dual_vs_support", TIGHTEN_TOL, 40, p_tightening),
]


def run_suite(seed=2024, only: Optional[List[str]] = None) -> List[PropertyResult]:
    """Run every property (or the named subset) with deterministic seeds."""
    out = []
    for k, (name, tol, trials, fn) in enumerate(PROPERTIES):
        if only and name not in only:
            continue
        out.append(_run(name, tol, trials, seed + 1000 * k, fn))
    return out
