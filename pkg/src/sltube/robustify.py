"""Deterministic counterparts of constraints that must hold for every disturbance.

A robust row reads::

    f @ xi + f0 + (G @ xi + g0) @ w <= rhs     for all w in W_stack

where ``xi`` are decision variables.  :func:`dual_encode` replaces the
quantifier by LP duality (``lam >= 0``, ``S^T lam = G xi + g0`` and
``f xi + f0 + s^T lam <= rhs``), which stays linear because ``lam`` only
multiplies constants.  :func:`tighten_rows_by_reachable_sets` handles the
case where ``G`` is zero, so the disturbance direction is numeric and the
row can be tightened offline by support functions.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .polytope import EmptyTightenedSet, Polytope, support


@dataclass(frozen=True)
class RobustRow:
    """One linear constraint quantified over the stacked disturbance.

    ``g_coeffs`` is ``None`` for rows whose disturbance direction ``g0`` does
    not depend on decision variables.
    """
    f_coeffs: sp.spmatrix
    rhs: float
    g_const: np.ndarray
    g_coeffs: Optional[sp.spmatrix] = None
    f_const: float = 0.0

    @classmethod
    def numeric(cls, g, rhs, f=None, nvar=0):
        f = sp.csr_matrix((1, nvar)) if f is None else sp.csr_matrix(np.atleast_2d(f))
        return cls(f, float(rhs), np.asarray(g, dtype=float).ravel())

    @property
    def nvar(self):
        return self.f_coeffs.shape[1]

    @property
    def dw(self):
        return self.g_const.size


@dataclass
class DualEncoding:
    """Linear constraints over ``[xi; lam]`` equivalent to a set of robust rows.

    ``dual_slices[i]`` lists ``(block, slice)`` pairs locating the
    multipliers of row ``i`` inside ``lam``.  Blocks with an identically zero
    disturbance direction get no multipliers (their optimal value is zero).
    """
    nvar: int
    n_dual: int
    eq_A: sp.csr_matrix
    eq_b: np.ndarray
    ineq_A: sp.csr_matrix
    ineq_b: np.ndarray
    dual_slices: list = field(default_factory=list)
    block_offsets: Sequence[float] = ()

    def tightenings(self, lam):
        """Per-row value ``s^T lam`` of a multiplier assignment."""
        lam = np.asarray(lam, dtype=float)
        return np.array([sum(self.block_offsets[b] @ lam[sl] for b, sl in row)
                         for row in self.dual_slices])


def _block_ranges(blocks):
    starts = np.cumsum([0] + [b.d for b in blocks])
    return [slice(int(a), int(b)) for a, b in zip(starts[:-1], starts[1:])]


def dual_encode(rows, W_stack: Polytope, blocks=None) -> DualEncoding:
    """Exact dual reformulation of robust rows.

    Args:
        rows: robust rows sharing the decision vector length.
        W_stack: set of the stacked disturbance.
        blocks: optional product decomposition ``W_stack = blocks[0] x ...``;
            multipliers are then allocated per factor.
    """
    blocks = [W_stack] if blocks is None else list(blocks)
    ranges = _block_ranges(blocks)
    if ranges[-1].stop != W_stack.d:
        raise ValueError("block dimensions do not add up to the stacked disturbance")
    nvar = rows[0].nvar if rows else 0
    eq_rows, eq_b, in_rows, in_b, dual_slices = [], [], [], [], []
    n_dual = 0
    for row in rows:
        if row.nvar != nvar or row.dw != W_stack.d:
            raise ValueError("robust row dimensions are inconsistent")
        G = None if row.g_coeffs is None else sp.csr_matrix(row.g_coeffs)
        ineq_x = sp.csr_matrix(row.f_coeffs)
        ineq_lam = []
        mine = []
        for b, (Wb, rng) in enumerate(zip(blocks, ranges)):
            g0 = row.g_const[rng]
            Gb = None if G is None else G[rng]
            if not np.any(g0) and (Gb is None or Gb.nnz == 0):
                continue
            sl = slice(n_dual, n_dual + Wb.q)
            n_dual += Wb.q
            mine.append((b, sl))
            # G_b xi - S_b^T lam = -g0
            eq_rows.append((Gb if Gb is not None else sp.csr_matrix((Wb.d, nvar)),
                            sl, -Wb.H.T))
            eq_b.append(-g0)
            ineq_lam.append((sl, Wb.h))
        in_rows.append((ineq_x, ineq_lam))
        in_b.append(row.rhs - row.f_const)
        dual_slices.append(mine)

    def assemble(parts, height):
        blocks_x, data, ri, ci = [], [], [], []
        offset = 0
        for x_part, lam_parts in parts:
            blocks_x.append(x_part)
            for sl, mat in lam_parts:
                mat = np.atleast_2d(mat)
                r, c = np.nonzero(mat)
                data.append(mat[r, c])
                ri.append(r + offset)
                ci.append(c + nvar + sl.start)
            offset += x_part.shape[0]
        left = sp.vstack(blocks_x) if blocks_x else sp.csr_matrix((0, nvar))
        left = sp.hstack([left, sp.csr_matrix((height, n_dual))])
        right = sp.csr_matrix((np.concatenate(data) if data else [],
                               (np.concatenate(ri) if ri else [], np.concatenate(ci) if ci else [])),
                              shape=(height, nvar + n_dual))
        return sp.csr_matrix(left + right)

    eq_parts = [(Gb, [(sl, St)]) for Gb, sl, St in eq_rows]
    eq_h = sum(p[0].shape[0] for p in eq_parts)
    in_parts = [(fx, [(sl, h[None, :]) for sl, h in lam]) for fx, lam in in_rows]
    eq_A = assemble(eq_parts, eq_h)
    in_A = assemble(in_parts, len(in_parts))
    return DualEncoding(nvar, n_dual, eq_A,
                        np.concatenate(eq_b) if eq_b else np.zeros(0),
                        in_A, np.asarray(in_b, dtype=float), dual_slices,
                        [b.h for b in blocks])


def support_tightening(row: RobustRow, W_stack: Polytope, blocks=None) -> float:
    """``max_w g0 @ w`` for a numeric row, summed over product factors."""
    if row.g_coeffs is not None and sp.csr_matrix(row.g_coeffs).nnz:
        raise ValueError("support tightening needs a numeric disturbance direction")
    blocks = [W_stack] if blocks is None else list(blocks)
    return float(sum(support(Wb, row.g_const[rng])
                     for Wb, rng in zip(blocks, _block_ranges(blocks))))


def tighten_rows_by_reachable_sets(rows, W_stack: Polytope, blocks=None):
    """Tightened right-hand sides ``rhs - f0 - support(W_stack, g0)``.

    Raises:
        EmptyTightenedSet: if a row with zero decision coefficients is
            violated after tightening, i.e. no decision can satisfy it.
    """
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        out[i] = row.rhs - row.f_const - support_tightening(row, W_stack, blocks)
        if row.f_coeffs.nnz == 0 and out[i] < 0:
            raise EmptyTightenedSet(f"row {i} cannot hold for every disturbance")
    return out


def dual_tightening(row: RobustRow, W_stack: Polytope, blocks=None) -> float:
    """Optimal ``s^T lam`` of the dual encoding of one numeric row, by LP."""
    enc = dual_encode([row], W_stack, blocks)
    if enc.n_dual == 0:
        return 0.0
    A_eq = enc.eq_A[:, enc.nvar:]
    cost = enc.ineq_A[0, enc.nvar:].toarray().ravel()
    res = linprog(cost, A_eq=A_eq, b_eq=enc.eq_b, bounds=[(0, None)] * enc.n_dual,
                  method="highs")
    if res.status != 0:
        raise RuntimeError(f"dual tightening LP failed: {res.message}")
    return float(res.fun)


def certify_equivalence(rows, W_stack: Polytope, blocks=None) -> float:
    """Largest gap between dual-optimal and support-function tightenings."""
    gap = 0.0
    for row in rows:
        gap = max(gap, abs(dual_tightening(row, W_stack, blocks)
                           - support_tightening(row, W_stack, blocks)))
    return gap
