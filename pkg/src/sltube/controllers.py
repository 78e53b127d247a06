"""Robust MPC formulations assembled as convex QPs.

Three controllers share one problem description:

* ``df``: disturbance feedback, written in system-response form with the
  full block-lower-triangular responses to the disturbance as variables;
* ``tube``: fixed constant tube gain, constraints tightened offline by the
  error reachable sets;
* ``sltmpc``: system level tube MPC, block-Toeplitz error responses plus
  nominal offsets, constraints robustified online with dual variables.

All three minimise the quadratic cost of the nominal (``w = 0``) prediction,
pin the first predicted state to the measured state and, by default,
require the nominal terminal state to be the origin.  Only ``w_0 .. w_{N-2}``
affect the constrained quantities ``x_0 .. x_{N-1}`` and ``u_0 .. u_{N-1}``,
so robust rows range over ``W^(N-1)``.  A robust terminal row on ``x_N`` uses
the same disturbances by default; ``disturbance_blocks=N`` adds ``w_{N-1}``.
"""
import dataclasses
import enum
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_discrete_are

from .horizon import LtiSystem, blk, build_horizon_operators, matrix_powers
from .polytope import EmptyTightenedSet, Polytope, box, cartesian_power, is_empty, vertices
from .qp import AffineQpTemplate, ClarabelSolver, SolveResult, Status, WrongStatus
from .robustify import RobustRow, dual_encode, tighten_rows_by_reachable_sets
from .slp import AffineResponse, ToeplitzResponse, is_block_lower_triangular


class Kind(str, enum.Enum):
    DF = "df"
    TUBE = "tube"
    SLTMPC = "sltmpc"


ORIGIN = "origin"


@dataclass(frozen=True)
class MpcProblem:
    """Robust MPC data.

    ``terminal`` is ``"origin"`` (nominal terminal state pinned to zero,
    terminal weight irrelevant) or a :class:`Polytope` enforced robustly on
    ``x_N``.  ``terminal_set`` adds a robust ``x_N`` row on top of the origin
    pin.  ``disturbance_blocks`` (``N-1`` or ``N``) is how many disturbances
    the robust rows range over.
    """
    sys: LtiSystem
    N: int
    Q: np.ndarray
    R: np.ndarray
    X: Polytope
    U: Polytope
    W: Polytope
    P: Optional[np.ndarray] = None
    terminal: Union[str, Polytope] = ORIGIN
    terminal_set: Optional[Polytope] = None
    disturbance_blocks: Optional[int] = None

    def __post_init__(self):
        n, m = self.sys.n, self.sys.m
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        P = Q if self.P is None else np.atleast_2d(np.asarray(self.P, dtype=float))
        for name, M, dim, strict in (("Q", Q, n, False), ("R", R, m, True), ("P", P, n, False)):
            if M.shape != (dim, dim) or not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric {dim} x {dim}")
            lo = np.linalg.eigvalsh(M).min()
            if lo < (1e-12 if strict else -1e-12):
                raise ValueError(f"{name} must be positive {'definite' if strict else 'semidefinite'}")
        if self.X.d != n or self.W.d != n or self.U.d != m:
            raise ValueError("set dimensions do not match the system")
        if not (np.all(self.X.h > 0) and np.all(self.U.h > 0)):
            raise ValueError("state and input sets must contain the origin in their interior")
        if self.terminal != ORIGIN and not isinstance(self.terminal, Polytope):
            raise ValueError("terminal must be 'origin' or a Polytope")
        if int(self.N) < 2:
            raise ValueError("horizon must be at least 2")
        if self.terminal_set is not None and not self.origin_terminal:
            raise ValueError("terminal_set is only used together with terminal='origin'")
        if self.terminal_set is not None and self.terminal_set.d != n:
            raise ValueError("terminal set dimension does not match the system")
        nb = int(self.N) - 1 if self.disturbance_blocks is None else int(self.disturbance_blocks)
        if nb not in (int(self.N) - 1, int(self.N)):
            raise ValueError("disturbance_blocks must be N-1 or N")
        object.__setattr__(self, "disturbance_blocks", nb)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "N", int(self.N))

    @property
    def n(self):
        return self.sys.n

    @property
    def m(self):
        return self.sys.m

    @property
    def origin_terminal(self):
        return isinstance(self.terminal, str)

    @property
    def n_dist(self):
        """Number of disturbance blocks the robust rows range over."""
        return self.disturbance_blocks

    @property
    def Xf(self) -> Optional[Polytope]:
        """Set imposed robustly on ``x_N``, if any."""
        return self.terminal_set if self.origin_terminal else self.terminal

    def with_disturbance(self, W: Polytope) -> "MpcProblem":
        return dataclasses.replace(self, W=W)

    def stage_cost(self, x, u):
        return float(x @ self.Q @ x + u @ self.R @ u)


@dataclass(frozen=True)
class DfPolicy:
    """``u = M w + v``; ``M`` is ``(N+1)m x Nn`` strictly block-lower-triangular."""
    M: np.ndarray
    v: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class TubePolicy:
    """``u_i = v_i + K (x_i - z_i)`` with nominal ``z`` and constant gain ``K``."""
    K: np.ndarray
    z: np.ndarray
    v: np.ndarray


def lqr_gain(sys: LtiSystem, Q, R):
    """Infinite-horizon discrete LQR gain with the convention ``u = K x``."""
    P = solve_discrete_are(sys.A, sys.B, Q, R)
    return -np.linalg.solve(R + sys.B.T @ P @ sys.B, sys.B.T @ P @ sys.A)


def tightening_measure(prob: "MpcProblem", K) -> float:
    """Total normalised tightening of a constant gain over the horizon.

    Sums ``t_{i,r} / h_r`` over every constrained state and input row, where
    ``t_{i,r}`` is the support of the error reachable set along row ``r`` at
    step ``i`` (and of ``x_N`` against the terminal set, if there is one).
    Unstable gains get a large finite penalty so simplex searches stay well
    defined.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    AK = prob.sys.closed_loop(K)
    rho = max(abs(np.linalg.eigvals(AK)))
    if rho >= 1:
        return 1e6 * (1.0 + rho)
    V = vertices(prob.W)
    N, nw = prob.N, prob.n_dist
    P = matrix_powers(AK, N)

    def cumulative(H, maps, upto):
        # support of M W along each row is a max over vertices
        per = np.array([(V @ (H @ M).T).max(axis=0) for M in maps[:upto]])
        return np.cumsum(per, axis=0)

    total = float((cumulative(prob.X.H, P, N - 1) / prob.X.h).sum())
    total += float((cumulative(prob.U.H, [K @ M for M in P], N - 1) / prob.U.h).sum())
    if prob.Xf is not None:
        # x_N sees A_K^(N-1-j) w_j for j < nw, i.e. powers N-nw .. N-1
        total += float((cumulative(prob.Xf.H, P[N - nw:N][::-1], nw)[-1] / prob.Xf.h).sum())
    return total


def min_tightening_gain(prob: "MpcProblem", starts=None):
    """Constant gain minimising :func:`tightening_measure` (Nelder-Mead).

    The search starts from the LQR gain plus any extra ``starts`` and keeps
    the best local optimum, so the result is deterministic.
    """
    from scipy.optimize import minimize

    cands = [lqr_gain(prob.sys, prob.Q, prob.R).ravel()]
    cands += [np.asarray(s, dtype=float).ravel() for s in (starts or [])]
    best = None
    for s in cands:
        r = minimize(lambda k: tightening_measure(prob, k.reshape(prob.m, prob.n)), s,
                     method="Nelder-Mead",
                     options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 4000})
        if best is None or r.fun < best.fun:
            best = r
    return best.x.reshape(prob.m, prob.n)


def policy_parameter_counts(kind, n, m, N) -> int:
    """Closed-form policy variable counts (duals excluded)."""
    kind = Kind(kind)
    if min(n, m, N) < 1:
        raise ValueError("dimensions must be positive")
    if kind is Kind.DF:
        # (N+1)(Nn/2 + 1)(n+m), kept in integers
        return (N + 1) * (N * n + 2) * (n + m) // 2
    if kind is Kind.SLTMPC:
        return 2 * (N + 1) * (n + 1) * (n + m)
    return (N + 1) * (n + m)


POLICY_SLICES = {
    Kind.DF: ("z", "v", "phi_x_w", "phi_u_w"),
    Kind.TUBE: ("z", "v"),
    Kind.SLTMPC: ("phi_x_blocks", "phi_u_blocks", "phi_z", "phi_v"),
}


def policy_variable_count(var_map, kind) -> int:
    """Number of policy variables registered in an assembled ``var_map``."""
    return sum(var_map[name].stop - var_map[name].start for name in POLICY_SLICES[Kind(kind)])


# ---------------------------------------------------------------- assembly helpers


def _psd_sqrt(M):
    vals, vecs = np.linalg.eigh(M)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


class _Layout:
    def __init__(self):
        self.size = 0
        self.slices = {}

    def add(self, name, count):
        self.slices[name] = slice(self.size, self.size + count)
        self.size += count
        return self.slices[name]

    def mats(self, name, count, rows, cols):
        """Index arrays ``(count, rows, cols)`` of a stack of matrices."""
        sl = self.add(name, count * rows * cols)
        return np.arange(sl.start, sl.stop).reshape(count, rows, cols)

    def vecs(self, name, count, width):
        sl = self.add(name, count * width)
        return np.arange(sl.start, sl.stop).reshape(count, width)


class _Rows:
    """Sparse rows accumulated as triplets."""

    def __init__(self):
        self.r, self.c, self.v, self.b = [], [], [], []

    def add(self, cols, vals, rhs):
        cols = np.ravel(cols)
        vals = np.broadcast_to(np.asarray(vals, dtype=float), cols.shape).ravel()
        k = len(self.b)
        self.r.append(np.full(cols.size, k))
        self.c.append(cols)
        self.v.append(vals)
        self.b.append(float(rhs))

    def matrix(self, ncols):
        if not self.b:
            return sp.csr_matrix((0, ncols)), np.zeros(0)
        A = sp.csr_matrix((np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))),
                          shape=(len(self.b), ncols))
        return A, np.asarray(self.b)


def _matrix_recursion(eq, A, B, X_next, X, U):
    """Rows of ``X_next - A X - B U = 0`` for index arrays of matrices."""
    n_rows, n_cols = X_next.shape
    for p in range(n_rows):
        for col in range(n_cols):
            eq.add(np.concatenate([[X_next[p, col]], X[:, col], U[:, col]]),
                   np.concatenate([[1.0], -A[p], -B[p]]), 0.0)


def _nominal_dynamics(eq, sys, z, v, z0):
    n = sys.n
    for p in range(n):
        eq.add([z[0, p]], [1.0], z0[p])
    for i in range(z.shape[0] - 1):
        for p in range(n):
            eq.add(np.concatenate([[z[i + 1, p]], z[i], v[i]]),
                   np.concatenate([[1.0], -sys.A[p], -sys.B[p]]), 0.0)


def _stage_weights(prob):
    return _psd_sqrt(prob.Q), _psd_sqrt(prob.R), _psd_sqrt(prob.P)


def _finish(layout, eq, ineq, cost, enc=None):
    """Merge primal rows with an optional dual encoding; add ``lam >= 0``."""
    nprimal = layout.size
    n_dual = 0 if enc is None else enc.n_dual
    if n_dual:
        layout.add("duals", n_dual)
    nv = layout.size
    eq_A, eq_b = eq.matrix(nv)
    in_A, in_b = ineq.matrix(nv)
    L, ell = cost.matrix(nv)
    if enc is not None:
        # encoder columns are [primal | duals], the same order as the layout
        eq_A = sp.vstack([eq_A, enc.eq_A])
        eq_b = np.concatenate([eq_b, enc.eq_b])
        in_A = sp.vstack([in_A, enc.ineq_A])
        in_b = np.concatenate([in_b, enc.ineq_b])
    if n_dual:
        nonneg = sp.hstack([sp.csr_matrix((n_dual, nprimal)), -sp.identity(n_dual)])
        in_A = sp.vstack([in_A, nonneg])
        in_b = np.concatenate([in_b, np.zeros(n_dual)])
    return L, -ell, sp.csr_matrix(eq_A), eq_b, sp.csr_matrix(in_A), in_b, dict(layout.slices)


# ---------------------------------------------------------------- df-MPC


def _build_df(prob: MpcProblem, x0):
    sys, N, n, m = prob.sys, prob.N, prob.n, prob.m
    nw = prob.n_dist
    lay = _Layout()
    z = lay.vecs("z", N + 1, n)
    v = lay.vecs("v", N + 1, m)
    # response to w_j lives in block column c = j + 1, rows i = c .. N
    pairs = [(i, c) for c in range(1, N + 1) for i in range(c, N + 1)]
    px_idx = lay.mats("phi_x_w", len(pairs), n, n)
    pu_idx = lay.mats("phi_u_w", len(pairs), m, n)
    PX = {pc: px_idx[k] for k, pc in enumerate(pairs)}
    PU = {pc: pu_idx[k] for k, pc in enumerate(pairs)}

    eq, ineq, cost = _Rows(), _Rows(), _Rows()
    _nominal_dynamics(eq, sys, z, v, x0)
    eq.add(v[N], 1.0, 0.0)
    for c in range(1, N + 1):
        ident = np.eye(n)
        for p in range(n):
            for q in range(n):
                eq.add([PX[c, c][p, q]], [1.0], ident[p, q])
        for i in range(c, N):
            _matrix_recursion(eq, sys.A, sys.B, PX[i + 1, c], PX[i, c], PU[i, c])
        for idx in PU[N, c].ravel():
            eq.add([idx], [1.0], 0.0)
    if prob.origin_terminal:
        for p in range(n):
            eq.add([z[N, p]], [1.0], 0.0)

    Qh, Rh, Ph = _stage_weights(prob)
    for i in range(N):
        for p in range(n):
            cost.add(z[i], Qh[p], 0.0)
        for p in range(m):
            cost.add(v[i], Rh[p], 0.0)
    for p in range(n):
        cost.add(z[N], Ph[p], 0.0)

    nvar = lay.size
    dw = nw * n
    rows = []

    def robust(H, h, nominal, resp, i, width):
        for r in range(H.shape[0]):
            f = sp.csr_matrix((H[r], (np.zeros(width, int), nominal)), shape=(1, nvar))
            gi, gc, gv = [], [], []
            for j in range(min(i, nw)):
                blk_idx = resp[i, j + 1]
                for l in range(n):
                    gi.append(np.full(blk_idx.shape[0], j * n + l))
                    gc.append(blk_idx[:, l])
                    gv.append(H[r])
            G = None
            if gi:
                G = sp.csr_matrix((np.concatenate(gv), (np.concatenate(gi), np.concatenate(gc))),
                                  shape=(dw, nvar))
            rows.append(RobustRow(f, float(h[r]), np.zeros(dw), G))

    for i in range(N):
        robust(prob.X.H, prob.X.h, z[i], PX, i, n)
        robust(prob.U.H, prob.U.h, v[i], PU, i, m)
    if prob.Xf is not None:
        robust(prob.Xf.H, prob.Xf.h, z[N], PX, N, n)
    enc = dual_encode(rows, cartesian_power(prob.W, nw), [prob.W] * nw)
    return _finish(lay, eq, ineq, cost, enc)


# ---------------------------------------------------------------- tube MPC


def tube_tightening(prob: MpcProblem, K):
    """Offline tightened offsets ``(state[i], input[i], terminal)`` for gain ``K``.

    Row ``r`` at step ``i`` loses ``sum_j support(W, (A_K^(i-1-j))^T H_r)``.
    """
    sys, N, n = prob.sys, prob.N, prob.n
    nw = prob.n_dist
    AK = matrix_powers(sys.closed_loop(K), N)
    KAK = [K @ P for P in AK]
    blocks = [prob.W] * nw
    W_stack = cartesian_power(prob.W, nw)

    def rows_for(H, h, maps, i):
        out = []
        for r in range(H.shape[0]):
            g = np.zeros(nw * n)
            for j in range(min(i, nw)):
                g[j * n:(j + 1) * n] = maps[i - 1 - j].T @ H[r]
            out.append(RobustRow.numeric(g, h[r]))
        return out

    state = [tighten_rows_by_reachable_sets(rows_for(prob.X.H, prob.X.h, AK, i), W_stack, blocks)
             for i in range(N)]
    inputs = [tighten_rows_by_reachable_sets(rows_for(prob.U.H, prob.U.h, KAK, i), W_stack, blocks)
              for i in range(N)]
    term = None
    if prob.Xf is not None:
        T = prob.Xf
        term = tighten_rows_by_reachable_sets(rows_for(T.H, T.h, AK, N), W_stack, blocks)
    for H, offs in [(prob.X.H, s) for s in state] + [(prob.U.H, s) for s in inputs] + \
            ([] if term is None else [(prob.Xf.H, term)]):
        if is_empty(H, offs):
            raise EmptyTightenedSet("tube tightening leaves an empty constraint set")
    return state, inputs, term


def _build_tube(prob: MpcProblem, tightening, x0):
    sys, N, n, m = prob.sys, prob.N, prob.n, prob.m
    state, inputs, term = tightening
    lay = _Layout()
    z = lay.vecs("z", N + 1, n)
    v = lay.vecs("v", N + 1, m)
    eq, ineq, cost = _Rows(), _Rows(), _Rows()
    _nominal_dynamics(eq, sys, z, v, x0)
    eq.add(v[N], 1.0, 0.0)
    if prob.origin_terminal:
        for p in range(n):
            eq.add([z[N, p]], [1.0], 0.0)
    if prob.Xf is not None:
        for r in range(prob.Xf.q):
            ineq.add(z[N], prob.Xf.H[r], term[r])
    for i in range(N):
        for r in range(prob.X.q):
            ineq.add(z[i], prob.X.H[r], state[i][r])
        for r in range(prob.U.q):
            ineq.add(v[i], prob.U.H[r], inputs[i][r])
    Qh, Rh, Ph = _stage_weights(prob)
    for i in range(N):
        for p in range(n):
            cost.add(z[i], Qh[p], 0.0)
        for p in range(m):
            cost.add(v[i], Rh[p], 0.0)
    for p in range(n):
        cost.add(z[N], Ph[p], 0.0)
    return _finish(lay, eq, ineq, cost)


# ---------------------------------------------------------------- SLTMPC


def _build_sltmpc(prob: MpcProblem, x0):
    sys, N, n, m = prob.sys, prob.N, prob.n, prob.m
    x0 = np.asarray(x0, dtype=float)
    lay = _Layout()
    PX = lay.mats("phi_x_blocks", N + 1, n, n)
    PU = lay.mats("phi_u_blocks", N + 1, m, n)
    fz = lay.vecs("phi_z", N + 1, n)
    fv = lay.vecs("phi_v", N + 1, m)
    # tau[k, r] bounds support(W, Phi^k^T H_r); only diagonals k <= N-2 reach x_{N-1}, u_{N-1}
    kx = N - 1
    # terminal row: x_N error is sum_j Phi^(N-1-j) w_j, j < nw, i.e. diagonals k0 .. N-1
    kt = min(N, prob.n_dist) if prob.Xf is not None else 0
    k0 = N - kt
    tx = lay.vecs("tau_x", kx, prob.X.q)
    tu = lay.vecs("tau_u", kx, prob.U.q)
    tf = lay.vecs("tau_f", kt, prob.Xf.q) if kt else None

    eq, ineq, cost = _Rows(), _Rows(), _Rows()
    ident = np.eye(n)
    for p in range(n):
        for q in range(n):
            eq.add([PX[0, p, q]], [1.0], ident[p, q])
    for k in range(N):
        _matrix_recursion(eq, sys.A, sys.B, PX[k + 1], PX[k], PU[k])
    for idx in PU[N].ravel():
        eq.add([idx], [1.0], 0.0)
    _nominal_dynamics(eq, sys, fz, fv, np.zeros(n))
    eq.add(fv[N], 1.0, 0.0)

    def nominal_state(i, weights):
        # weights @ (phi_z^i + Phi_x^i x0)
        cols = np.concatenate([fz[i], PX[i].ravel()])
        vals = np.concatenate([weights, np.outer(weights, x0).ravel()])
        return cols, vals

    def nominal_input(i, weights):
        cols = np.concatenate([fv[i], PU[i].ravel()])
        vals = np.concatenate([weights, np.outer(weights, x0).ravel()])
        return cols, vals

    if prob.origin_terminal:
        for p in range(n):
            eq.add(*nominal_state(N, ident[p]), 0.0)

    Qh, Rh, Ph = _stage_weights(prob)
    for i in range(N):
        for p in range(n):
            cost.add(*nominal_state(i, Qh[p]), 0.0)
        for p in range(m):
            cost.add(*nominal_input(i, Rh[p]), 0.0)
    for p in range(n):
        cost.add(*nominal_state(N, Ph[p]), 0.0)

    for i in range(N):
        for r in range(prob.X.q):
            cols, vals = nominal_state(i, prob.X.H[r])
            ineq.add(np.concatenate([cols, tx[:i, r]]), np.concatenate([vals, np.ones(i)]),
                     prob.X.h[r])
        for r in range(prob.U.q):
            cols, vals = nominal_input(i, prob.U.H[r])
            ineq.add(np.concatenate([cols, tu[:i, r]]), np.concatenate([vals, np.ones(i)]),
                     prob.U.h[r])
    if kt:
        T = prob.Xf
        for r in range(T.q):
            cols, vals = nominal_state(N, T.H[r])
            ineq.add(np.concatenate([cols, tf[:, r]]), np.concatenate([vals, np.ones(kt)]), T.h[r])

    nvar = lay.size
    rows = []

    def epigraph(H, blocks, taus, count):
        for k in range(count):
            for r in range(H.shape[0]):
                f = sp.csr_matrix(([-1.0], ([0], [taus[k, r]])), shape=(1, nvar))
                idx = blocks[k]
                gi = np.repeat(np.arange(n)[None, :], idx.shape[0], axis=0)
                gv = np.repeat(H[r][:, None], n, axis=1)
                G = sp.csr_matrix((gv.ravel(), (gi.ravel(), idx.ravel())), shape=(n, nvar))
                rows.append(RobustRow(f, 0.0, np.zeros(n), G))

    epigraph(prob.X.H, PX, tx, kx)
    epigraph(prob.U.H, PU, tu, kx)
    if kt:
        epigraph(prob.Xf.H, PX[k0:], tf, kt)
    enc = dual_encode(rows, prob.W)
    return _finish(lay, eq, ineq, cost, enc)


# ---------------------------------------------------------------- controller object


class MpcController:
    """A robust MPC controller with its QP family assembled once.

    Args:
        prob: problem data.
        kind: ``"df"``, ``"tube"`` or ``"sltmpc"``.
        K: tube gain (``tube`` only); defaults to the LQR gain of ``(Q, R)``.
        solver: QP back end, :class:`~sltube.qp.ClarabelSolver` by default.
    """

    def __init__(self, prob: MpcProblem, kind, K=None, solver=None):
        self.prob = prob
        self.kind = Kind(kind)
        self.solver = solver or ClarabelSolver()
        self.ops = build_horizon_operators(prob.sys, prob.N)
        self.K = None
        self.empty_tightening = False
        meta = {"kind": self.kind.value}
        if self.kind is Kind.TUBE:
            self.K = lqr_gain(prob.sys, prob.Q, prob.R) if K is None else np.atleast_2d(K)
            rho = max(abs(np.linalg.eigvals(prob.sys.closed_loop(self.K))))
            if rho >= 1:
                warnings.warn(f"tube gain is not Schur stable (spectral radius {rho:.3f})")
            try:
                tight = tube_tightening(prob, self.K)
            except EmptyTightenedSet:
                self.empty_tightening = True
                self._template = None
                return
            build = lambda x0: _build_tube(prob, tight, x0)
        elif self.kind is Kind.DF:
            build = lambda x0: _build_df(prob, x0)
        else:
            build = lambda x0: _build_sltmpc(prob, x0)
        self._template = AffineQpTemplate(build, prob.n, meta)

    @property
    def var_map(self):
        return None if self._template is None else dict(self._template.var_map)

    def assemble(self, x0, with_cost=True):
        if self._template is None:
            raise EmptyTightenedSet("tube tightening leaves an empty constraint set")
        x0 = np.asarray(x0, dtype=float).ravel()
        return self._template.instantiate(x0, with_cost, meta={"x0": x0})

    def solve(self, x0, feasibility_only=False) -> SolveResult:
        """Solve at ``x0``; the result carries ``first_input`` when optimal."""
        x0 = np.asarray(x0, dtype=float).ravel()
        if self.empty_tightening:
            return SolveResult(Status.INFEASIBLE,
                               diagnostics={"reason": "empty tightened set",
                                            "settings": self.solver.settings()})
        spec = self.assemble(x0, with_cost=not feasibility_only)
        res = self.solver.solve(spec)
        if feasibility_only and res.status is Status.SOLVER_ERROR:
            # zero objectives occasionally stall the interior point; the cost regularises
            first = res.diagnostics.get("raw_status")
            res = self.solver.solve(self.assemble(x0, with_cost=True))
            res.diagnostics["fallback_from"] = first
        if res.optimal:
            res.first_input = self.first_input(res)
        return res

    def first_input(self, res):
        var, m, n = res.variables, self.prob.m, self.prob.n
        if self.kind is Kind.SLTMPC:
            x0 = res.spec.meta["x0"]
            return var["phi_v"][:m] + var["phi_u_blocks"][: m * n].reshape(m, n) @ x0
        return var["v"][:m].copy()

    def extract_policy(self, res):
        return extract_policy(res, self)


def extract_policy(res: SolveResult, ctrl: MpcController):
    """Policy object behind an optimal result.

    Returns :class:`DfPolicy`, :class:`TubePolicy` or, for SLTMPC, an
    :class:`~sltube.slp.AffineResponse` built from the Toeplitz blocks.
    """
    if not res.optimal:
        raise WrongStatus(f"cannot extract a policy from status {res.status.value}")
    prob, var = ctrl.prob, res.variables
    N, n, m = prob.N, prob.n, prob.m
    if ctrl.kind is Kind.TUBE:
        return TubePolicy(ctrl.K.copy(), var["z"].copy(), var["v"].copy())
    if ctrl.kind is Kind.DF:
        pairs = [(i, c) for c in range(1, N + 1) for i in range(c, N + 1)]
        pu = var["phi_u_w"].reshape(len(pairs), m, n)
        M = np.zeros(((N + 1) * m, N * n))
        for k, (i, c) in enumerate(pairs):
            M[blk(i, m), blk(c - 1, n)] = pu[k]
        if not is_block_lower_triangular(np.hstack([np.zeros(((N + 1) * m, n)), M]), m, n):
            raise AssertionError("df gain lost its block structure")
        return DfPolicy(M, var["v"].copy(), var["z"].copy())
    tr = ToeplitzResponse(var["phi_x_blocks"].reshape(N + 1, n, n),
                          var["phi_u_blocks"].reshape(N + 1, m, n))
    return AffineResponse.from_toeplitz(tr, var["phi_z"], var["phi_v"])


def predict(ctrl: MpcController, policy, x0, w):
    """Predicted stacked ``(x, u)`` of a policy under the disturbance ``w``.

    ``w`` may hold fewer than ``N`` blocks; missing ones are zero.
    """
    prob, ops = ctrl.prob, ctrl.ops
    N, n = prob.N, prob.n
    wf = np.zeros(N * n)
    wv = np.ravel(w)
    wf[: wv.size] = wv
    x0 = np.ravel(x0)
    if isinstance(policy, DfPolicy):
        u = policy.M @ wf + policy.v
        return ops.a_pow @ x0 + ops.b_conv @ u + ops.e_conv @ wf, u
    if isinstance(policy, TubePolicy):
        m = prob.m
        x = np.zeros((N + 1) * n)
        u = np.zeros((N + 1) * m)
        x[:n] = x0
        for i in range(N + 1):
            u[blk(i, m)] = policy.v[blk(i, m)] + policy.K @ (x[blk(i, n)] - policy.z[blk(i, n)])
            if i < N:
                x[blk(i + 1, n)] = (prob.sys.A @ x[blk(i, n)] + prob.sys.B @ u[blk(i, m)]
                                    + wf[blk(i, n)])
        return x, u
    return policy.apply(ops, np.concatenate([x0, wf]))


def constraint_violation(prob: MpcProblem, x, u) -> float:
    """Largest constraint excess of a predicted trajectory (``<= 0`` when satisfied)."""
    N, n, m = prob.N, prob.n, prob.m
    X = np.reshape(x, (N + 1, n))
    Uu = np.reshape(u, (N + 1, m))
    worst = max(np.max(X[:N] @ prob.X.H.T - prob.X.h), np.max(Uu[:N] @ prob.U.H.T - prob.U.h))
    if prob.Xf is not None:
        worst = max(worst, np.max(prob.Xf.H @ X[N] - prob.Xf.h))
    return float(worst)


def assemble_df(prob: MpcProblem, x0):
    return MpcController(prob, Kind.DF).assemble(x0)


def assemble_tube(prob: MpcProblem, x0, K=None):
    return MpcController(prob, Kind.TUBE, K=K).assemble(x0)


def assemble_sltmpc(prob: MpcProblem, x0):
    return MpcController(prob, Kind.SLTMPC).assemble(x0)


def benchmark_problem(theta=0.05, N=10, robust_terminal=True) -> MpcProblem:
    """The double-integrator-like benchmark: ``A = [[1, .15], [0, 1]]``, ``B = [.5, .5]``.

    With ``robust_terminal`` (default) ``x_N`` must also stay in ``X`` for
    every ``w_0 .. w_{N-1}``, on top of the nominal pin ``z_N = 0``.
    """
    sys = LtiSystem(np.array([[1.0, 0.15], [0.0, 1.0]]), np.array([[0.5], [0.5]]))
    X = box([-1.5, -1.0], [0.5, 1.5])
    extra = {"terminal_set": X, "disturbance_blocks": N} if robust_terminal else {}
    return MpcProblem(sys, N, np.eye(2), np.array([[10.0]]), X, box([-1.0], [1.0]),
                      box([-theta, -0.1], [theta, 0.1]), **extra)
