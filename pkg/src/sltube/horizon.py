"""Horizon-stacked operators of the lifted dynamics x+ = A x + B u + w.

Stacked vectors follow the convention ``x = [x_0, ..., x_N]``,
``u = [u_0, ..., u_N]``, ``w = [w_0, ..., w_{N-1}]`` and
``delta = [x_0, w_0, ..., w_{N-1}]``.  All operators are dense.
"""
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .config import EQUALITY_TOL


class DimensionError(ValueError):
    """Raised when matrix or sequence shapes are inconsistent."""


def blk(i, size):
    """Flat slice of block ``i`` in a stacked vector with blocks of ``size``."""
    return slice(i * size, (i + 1) * size)


@dataclass(frozen=True)
class LtiSystem:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0] or B.shape[1] < 1:
            raise DimensionError(f"B must be {A.shape[0]} x m, got {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("system matrices must be finite")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def closed_loop(self, K):
        """State matrix ``A + B K`` under the static gain ``K``."""
        return self.A + self.B @ np.atleast_2d(K)


@dataclass(frozen=True)
class HorizonOperators:
    """Block operators of the stacked dynamics over a horizon ``N``.

    Attributes:
        za: block down-shifted ``A``, ``(N+1)n x (N+1)n``.
        zb: block down-shifted ``B``, ``(N+1)n x (N+1)m``.
        a_pow: stacked powers ``[I; A; ...; A^N]``.
        e_conv: disturbance convolution with blocks ``A^(i-1-j)``.
        b_conv: input-to-state map ``[a_pow e_conv] @ zb``.
    """
    sys: LtiSystem
    N: int
    za: np.ndarray
    zb: np.ndarray
    a_pow: np.ndarray
    e_conv: np.ndarray
    b_conv: np.ndarray

    @property
    def n(self):
        return self.sys.n

    @property
    def m(self):
        return self.sys.m

    @cached_property
    def state_response(self):
        """``[a_pow e_conv]``, which equals ``(I - za)^-1``."""
        return np.hstack([self.a_pow, self.e_conv])


@dataclass(frozen=True)
class Trajectory:
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    delta: np.ndarray
    n: int
    m: int

    @property
    def N(self):
        return self.w.size // self.n

    def states(self):
        return self.x.reshape(self.N + 1, self.n)

    def inputs(self):
        return self.u.reshape(self.N + 1, self.m)


def matrix_powers(A, N):
    """List ``[I, A, ..., A^N]``."""
    out = [np.eye(A.shape[0])]
    for _ in range(N):
        out.append(A @ out[-1])
    return out


def build_horizon_operators(sys: LtiSystem, N: int) -> HorizonOperators:
    if int(N) != N or N < 1:
        raise ValueError(f"horizon must be a positive integer, got {N}")
    N = int(N)
    n, m = sys.n, sys.m
    za = np.zeros(((N + 1) * n, (N + 1) * n))
    zb = np.zeros(((N + 1) * n, (N + 1) * m))
    for i in range(N):
        za[blk(i + 1, n), blk(i, n)] = sys.A
        zb[blk(i + 1, n), blk(i, m)] = sys.B
    powers = matrix_powers(sys.A, N)
    a_pow = np.vstack(powers)
    e_conv = np.zeros(((N + 1) * n, N * n))
    for i in range(1, N + 1):
        for j in range(i):
            e_conv[blk(i, n), blk(j, n)] = powers[i - 1 - j]
    b_conv = np.hstack([a_pow, e_conv]) @ zb
    for arr in (za, zb, a_pow, e_conv, b_conv):
        arr.setflags(write=False)
    return HorizonOperators(sys, N, za, zb, a_pow, e_conv, b_conv)


def neumann_identity_residual(ops: HorizonOperators) -> float:
    """Max-norm of ``(I - za) [a_pow e_conv] - I``."""
    size = ops.za.shape[0]
    lhs = (np.eye(size) - ops.za) @ ops.state_response
    return float(np.max(np.abs(lhs - np.eye(size))))


def _as_blocks(seq, width, name):
    arr = np.asarray(seq, dtype=float)
    if arr.ndim == 1:
        if arr.size % width:
            raise DimensionError(f"{name} length {arr.size} not a multiple of {width}")
        arr = arr.reshape(-1, width)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise DimensionError(f"{name} must have rows of length {width}, got {arr.shape}")
    return arr


def propagate(sys: LtiSystem, x0, u, w) -> Trajectory:
    """Roll the recursion forward over one horizon.

    ``w`` holds ``N`` disturbance blocks; ``u`` holds ``N`` or ``N + 1``
    input blocks (a missing ``u_N`` is taken as zero).
    """
    n, m = sys.n, sys.m
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != n:
        raise DimensionError(f"x0 must have length {n}, got {x0.size}")
    w = _as_blocks(w, n, "w")
    u = _as_blocks(u, m, "u")
    N = w.shape[0]
    if u.shape[0] == N:
        u = np.vstack([u, np.zeros((1, m))])
    if u.shape[0] != N + 1:
        raise DimensionError(f"u must have {N} or {N + 1} blocks, got {u.shape[0]}")
    x = np.empty((N + 1, n))
    x[0] = x0
    for k in range(N):
        x[k + 1] = sys.A @ x[k] + sys.B @ u[k] + w[k]
    return Trajectory(x.reshape(-1), u.reshape(-1), w.reshape(-1),
                      np.concatenate([x0, w.reshape(-1)]), n, m)


def stacked_states(ops: HorizonOperators, x0, u, w):
    """Explicit form ``a_pow x0 + b_conv u + e_conv w`` of the stacked states."""
    return ops.a_pow @ np.ravel(x0) + ops.b_conv @ np.ravel(u) + ops.e_conv @ np.ravel(w)


def is_nilpotent_shift(ops: HorizonOperators, tol=EQUALITY_TOL) -> bool:
    return bool(np.max(np.abs(np.linalg.matrix_power(ops.za, ops.N + 1))) <= tol)
