"""System responses over a finite horizon.

A system response is the pair of block-lower-triangular maps taking
``delta = [x_0; w]`` to the stacked states and inputs.  Three flavours are
provided: the general response, the diagonally restricted (block-Toeplitz)
response and the affine response that adds nominal offsets.  The module
also contains the constructions that move between disturbance-feedback
policies and responses, and the residual checks certifying them.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import STRUCTURAL_TOL
from .horizon import HorizonOperators, LtiSystem, blk, matrix_powers


class SubspaceViolation(ValueError):
    """A response does not satisfy the achievability equation."""

    def __init__(self, residual, tol):
        super().__init__(f"subspace residual {residual:.3e} exceeds tolerance {tol:.1e}")
        self.residual = residual
        self.tol = tol


class ZeroInitialState(ValueError):
    """The construction needs a nonzero initial state."""


def is_block_lower_triangular(M, row_block, col_block, strict=False, tol=0.0):
    """Whether ``M`` vanishes above the block diagonal (or on it, if strict)."""
    rows = M.shape[0] // row_block
    cols = M.shape[1] // col_block
    for i in range(rows):
        for j in range(cols):
            if j > i or (strict and j == i):
                if np.any(np.abs(M[blk(i, row_block), blk(j, col_block)]) > tol):
                    return False
    return True


def blt_inverse(L, size):
    """Inverse of a block-lower-triangular matrix by block forward substitution.

    Diagonal blocks (``size x size``) must be invertible.
    """
    nb = L.shape[0] // size
    out = np.zeros_like(L, dtype=float)
    diag_inv = [np.linalg.inv(L[blk(i, size), blk(i, size)]) for i in range(nb)]
    for j in range(nb):
        out[blk(j, size), blk(j, size)] = diag_inv[j]
        for i in range(j + 1, nb):
            acc = np.zeros((size, size))
            for k in range(j, i):
                acc += L[blk(i, size), blk(k, size)] @ out[blk(k, size), blk(j, size)]
            out[blk(i, size), blk(j, size)] = -diag_inv[i] @ acc
    return out


@dataclass(frozen=True)
class SystemResponse:
    phi_x: np.ndarray
    phi_u: np.ndarray

    def apply(self, delta):
        delta = np.ravel(delta)
        return self.phi_x @ delta, self.phi_u @ delta


@dataclass(frozen=True)
class BltController:
    """Block-lower-triangular feedback ``u = gains @ x + affine_terms``."""
    gains: np.ndarray
    affine_terms: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ToeplitzResponse:
    """Diagonally restricted response stored as its distinct blocks.

    ``x_blocks[i]`` (``n x n``) and ``u_blocks[i]`` (``m x n``) fill the
    ``i``-th block sub-diagonal; ``x_blocks[0]`` is the identity.
    """
    x_blocks: np.ndarray
    u_blocks: np.ndarray

    def __post_init__(self):
        xb = np.asarray(self.x_blocks, dtype=float)
        ub = np.asarray(self.u_blocks, dtype=float)
        if xb.ndim != 3 or ub.ndim != 3 or xb.shape[0] != ub.shape[0]:
            raise ValueError("x_blocks and u_blocks must be stacks of equal length")
        if xb.shape[1] != xb.shape[2] or ub.shape[2] != xb.shape[1]:
            raise ValueError("block shapes must be n x n and m x n")
        object.__setattr__(self, "x_blocks", xb)
        object.__setattr__(self, "u_blocks", ub)

    @property
    def N(self):
        return self.x_blocks.shape[0] - 1

    @property
    def n(self):
        return self.x_blocks.shape[1]

    @property
    def m(self):
        return self.u_blocks.shape[1]

    def to_dict(self):
        return {"x_blocks": self.x_blocks.tolist(), "u_blocks": self.u_blocks.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data["x_blocks"]), np.array(data["u_blocks"]))


@dataclass(frozen=True)
class AffineResponse:
    """Affine response ``[[1, 0], [phi_z, phi_e]]`` and ``[phi_v, phi_k]``.

    ``delta_z`` is the optional initial nominal offset ``[phi_z^0; 0]``;
    ``None`` means the zero-initial-state regime.
    """
    phi_z: np.ndarray
    phi_v: np.ndarray
    phi_e: np.ndarray
    phi_k: np.ndarray
    delta_z: Optional[np.ndarray] = field(default=None)

    def effective_phi_z(self, ops: HorizonOperators):
        """First column of the affine state map, with ``delta_z`` removed."""
        if self.delta_z is None:
            return self.phi_z
        return self.phi_z - ops.state_response @ self.delta_z

    def tilde_maps(self, ops: HorizonOperators):
        """Dense extended maps acting on ``[1; delta]``."""
        nx = self.phi_e.shape[0]
        top = np.zeros((1, 1 + nx))
        top[0, 0] = 1.0
        tx = np.vstack([top, np.hstack([self.effective_phi_z(ops)[:, None], self.phi_e])])
        tu = np.hstack([self.phi_v[:, None], self.phi_k])
        return tx, tu

    def apply(self, ops, delta):
        delta = np.ravel(delta)
        x = self.effective_phi_z(ops) + self.phi_e @ delta
        u = self.phi_v + self.phi_k @ delta
        return x, u

    def to_dict(self):
        out = {"phi_z": self.phi_z.tolist(), "phi_v": self.phi_v.tolist(),
               "phi_e": self.phi_e.tolist(), "phi_k": self.phi_k.tolist()}
        if self.delta_z is not None:
            out["delta_z"] = self.delta_z.tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        dz = data.get("delta_z")
        return cls(np.array(data["phi_z"], dtype=float), np.array(data["phi_v"], dtype=float),
                   np.array(data["phi_e"], dtype=float), np.array(data["phi_k"], dtype=float),
                   None if dz is None else np.array(dz, dtype=float))

    @classmethod
    def from_toeplitz(cls, tr: ToeplitzResponse, phi_z, phi_v, delta_z=None):
        resp = toeplitz_expand(tr)
        return cls(np.asarray(phi_z, dtype=float).ravel(), np.asarray(phi_v, dtype=float).ravel(),
                   resp.phi_x, resp.phi_u, delta_z)


def _check_square_blt(ops, K):
    n, m, N = ops.n, ops.m, ops.N
    if K.shape != ((N + 1) * m, (N + 1) * n):
        raise ValueError(f"gain must be {(N + 1) * m} x {(N + 1) * n}, got {K.shape}")
    if not is_block_lower_triangular(K, m, n):
        raise ValueError("gain must be block-lower-triangular")


def subspace_residual(ops: HorizonOperators, resp: SystemResponse) -> float:
    """Max-norm of ``[I - za, -zb] [phi_x; phi_u] - I``."""
    size = ops.za.shape[0]
    lhs = (np.eye(size) - ops.za) @ resp.phi_x - ops.zb @ resp.phi_u
    return float(np.max(np.abs(lhs - np.eye(size))))


def response_from_controller(ops: HorizonOperators, K) -> SystemResponse:
    """Closed-loop maps ``(I - za - zb K)^-1`` and ``K (I - za - zb K)^-1``."""
    gains = K.gains if isinstance(K, BltController) else np.asarray(K, dtype=float)
    if isinstance(K, BltController) and K.affine_terms is not None:
        raise ValueError("affine terms are not part of a linear system response")
    _check_square_blt(ops, gains)
    closed = np.eye(ops.za.shape[0]) - ops.za - ops.zb @ gains
    phi_x = blt_inverse(closed, ops.n)
    return SystemResponse(phi_x, gains @ phi_x)


def controller_from_response(ops: HorizonOperators, resp: SystemResponse,
                             tol=STRUCTURAL_TOL) -> BltController:
    """Recover ``K = phi_u phi_x^-1`` from an achievable response."""
    res = subspace_residual(ops, resp)
    if res > tol:
        raise SubspaceViolation(res, tol)
    return BltController(resp.phi_u @ blt_inverse(resp.phi_x, ops.n))


def response_from_inputs(ops: HorizonOperators, phi_u) -> SystemResponse:
    """State map ``[a_pow e_conv] + b_conv phi_u`` paired with ``phi_u``."""
    phi_u = np.asarray(phi_u, dtype=float)
    return SystemResponse(ops.state_response + ops.b_conv @ phi_u, phi_u)


def df_to_slp(ops: HorizonOperators, M, v, x0) -> SystemResponse:
    """Response reproducing the disturbance-feedback policy ``u = M w + v``.

    The first block-column ``Phi_v`` is the least-norm matrix with
    ``Phi_v x0 = v``.
    """
    n, m, N = ops.n, ops.m, ops.N
    M = np.asarray(M, dtype=float)
    v = np.asarray(v, dtype=float).ravel()
    x0 = np.asarray(x0, dtype=float).ravel()
    if M.shape != ((N + 1) * m, N * n):
        raise ValueError(f"M must be {(N + 1) * m} x {N * n}, got {M.shape}")
    if v.size != (N + 1) * m or x0.size != n:
        raise ValueError("v or x0 has the wrong length")
    if not is_block_lower_triangular(np.hstack([np.zeros(((N + 1) * m, n)), M]), m, n):
        raise ValueError("M must be strictly block-lower-triangular")
    norm2 = float(x0 @ x0)
    if norm2 == 0.0:
        raise ZeroInitialState("the first response column is undetermined for x0 = 0")
    phi_v = np.outer(v, x0) / norm2
    return response_from_inputs(ops, np.hstack([phi_v, M]))


def slp_to_df(ops: HorizonOperators, resp: SystemResponse, x0, tol=STRUCTURAL_TOL):
    """Disturbance-feedback pair ``(M, v)`` acting like ``resp`` from ``x0``."""
    res = subspace_residual(ops, resp)
    if res > tol:
        raise SubspaceViolation(res, tol)
    n = ops.n
    x0 = np.asarray(x0, dtype=float).ravel()
    return resp.phi_u[:, n:].copy(), resp.phi_u[:, :n] @ x0


def df_rollout(ops: HorizonOperators, M, v, x0, w):
    """Stacked ``(x, u)`` of the policy ``u = M w + v``."""
    u = np.asarray(M) @ np.ravel(w) + np.ravel(v)
    x = ops.a_pow @ np.ravel(x0) + ops.b_conv @ u + ops.e_conv @ np.ravel(w)
    return x, u


def toeplitz_expand(tr: ToeplitzResponse) -> SystemResponse:
    """Dense block-Toeplitz lower-triangular maps."""
    N, n, m = tr.N, tr.n, tr.m
    phi_x = np.zeros(((N + 1) * n, (N + 1) * n))
    phi_u = np.zeros(((N + 1) * m, (N + 1) * n))
    for i in range(N + 1):
        for j in range(i + 1):
            phi_x[blk(i, n), blk(j, n)] = tr.x_blocks[i - j]
            phi_u[blk(i, m), blk(j, n)] = tr.u_blocks[i - j]
    return SystemResponse(phi_x, phi_u)


def toeplitz_recursion_residual(sys: LtiSystem, tr: ToeplitzResponse) -> float:
    """Max-norm defect of ``X0 = I`` and ``X(i+1) = A X(i) + B U(i)``."""
    res = np.max(np.abs(tr.x_blocks[0] - np.eye(tr.n)))
    for i in range(tr.N):
        step = tr.x_blocks[i + 1] - sys.A @ tr.x_blocks[i] - sys.B @ tr.u_blocks[i]
        res = max(res, np.max(np.abs(step)))
    return float(res)


def toeplitz_from_gain(sys: LtiSystem, K, N: int) -> ToeplitzResponse:
    """Toeplitz response of the constant gain ``K``: blocks ``A_K^i`` and ``K A_K^i``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    powers = np.array(matrix_powers(sys.closed_loop(K), N))
    return ToeplitzResponse(powers, np.einsum("ij,kjl->kil", K, powers))


def affine_residual_parts(ops: HorizonOperators, ar: AffineResponse):
    """``(feedback, nominal)`` residuals of an affine response.

    The feedback part is the achievability residual of ``(phi_e, phi_k)``;
    the nominal part is ``(I - za) phi_z - zb phi_v - delta_z``.
    """
    feedback = subspace_residual(ops, SystemResponse(ar.phi_e, ar.phi_k))
    dz = np.zeros_like(ar.phi_z) if ar.delta_z is None else ar.delta_z
    nominal = ar.phi_z - ops.za @ ar.phi_z - ops.zb @ ar.phi_v - dz
    return feedback, float(np.max(np.abs(nominal)))


def affine_subspace_residual(ops: HorizonOperators, ar: AffineResponse) -> float:
    """Max-norm residual of the extended achievability equation."""
    tx, tu = ar.tilde_maps(ops)
    size = tx.shape[0]
    za_t = np.zeros((size, size))
    za_t[1:, 1:] = ops.za
    zb_t = np.vstack([np.zeros((1, ops.zb.shape[1])), ops.zb])
    lhs = (np.eye(size) - za_t) @ tx - zb_t @ tu
    return float(np.max(np.abs(lhs - np.eye(size))))


def affine_controller_recovery(ops: HorizonOperators, ar: AffineResponse,
                               tol=STRUCTURAL_TOL) -> BltController:
    """Affine feedback ``u = K x + k`` achieving ``ar``."""
    res = affine_subspace_residual(ops, ar)
    if res > tol:
        raise SubspaceViolation(res, tol)
    gains = ar.phi_k @ blt_inverse(ar.phi_e, ops.n)
    return BltController(gains, ar.phi_v - gains @ ar.effective_phi_z(ops))


def rollout_controller(sys: LtiSystem, ctrl: BltController, x0, w):
    """Apply ``u_i = sum_j K_ij x_j + k_i`` causally; returns stacked ``(x, u)``."""
    n, m = sys.n, sys.m
    w = np.asarray(w, dtype=float).reshape(-1, n)
    N = w.shape[0]
    K = ctrl.gains
    k = np.zeros((N + 1) * m) if ctrl.affine_terms is None else ctrl.affine_terms
    x = np.zeros((N + 1) * n)
    u = np.zeros((N + 1) * m)
    x[:n] = np.ravel(x0)
    for i in range(N + 1):
        u[blk(i, m)] = K[blk(i, m), : (i + 1) * n] @ x[: (i + 1) * n] + k[blk(i, m)]
        if i < N:
            x[blk(i + 1, n)] = sys.A @ x[blk(i, n)] + sys.B @ u[blk(i, m)] + w[i]
    return x, u


def verify_decoupling(ops: HorizonOperators, ar: AffineResponse, w, x0):
    """Split a closed-loop rollout into error and nominal parts.

    Returns ``(e, phi_z, residuals)`` where ``residuals`` holds the defect of
    the error dynamics ``e = za e + zb u_e + delta`` with ``u_e = phi_k delta``,
    of the nominal recursion ``phi_z = za phi_z + zb phi_v + delta_z``, and of
    the input split ``u = phi_v + u_e``.
    """
    ctrl = affine_controller_recovery(ops, ar, tol=np.inf)
    x, u = rollout_controller(ops.sys, ctrl, x0, w)
    delta = np.concatenate([np.ravel(x0), np.ravel(w)])
    e = x - ar.effective_phi_z(ops)
    u_e = ar.phi_k @ delta
    dz = np.zeros_like(ar.phi_z) if ar.delta_z is None else ar.delta_z
    residuals = {
        "error": float(np.max(np.abs(e - ops.za @ e - ops.zb @ u_e - delta))),
        "nominal": float(np.max(np.abs(ar.phi_z - ops.za @ ar.phi_z - ops.zb @ ar.phi_v - dz))),
        "input": float(np.max(np.abs(u - ar.phi_v - u_e))),
    }
    return e, ar.phi_z.copy(), residuals


def nominal_offsets(ops: HorizonOperators, phi_v, z0=None):
    """Offsets ``(phi_z, delta_z)`` driven by ``phi_v`` from the initial offset ``z0``."""
    n = ops.n
    dz = np.zeros(ops.za.shape[0])
    if z0 is not None:
        dz[:n] = np.ravel(z0)
    phi_z = ops.state_response @ dz + ops.state_response @ (ops.zb @ np.ravel(phi_v))
    return phi_z, (None if z0 is None else dz)

