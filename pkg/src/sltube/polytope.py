"""Polytopes in H-representation ``{x : H x <= h}``.

Support functions and emptiness checks are linear programs solved with
HiGHS through :func:`scipy.optimize.linprog`.  Vertex enumeration is not
part of this module on purpose; it only exists in the test oracles.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag
from scipy.optimize import linprog

from .config import MEMBERSHIP_TOL


class EmptyPolytope(ValueError):
    """The constraint system ``H x <= h`` has no solution."""


class EmptyTightenedSet(EmptyPolytope):
    """A tightening removed every point of the set."""


class UnboundedDirection(ValueError):
    """The support function is infinite in the requested direction."""


def _is_feasible(H, h):
    res = linprog(np.zeros(H.shape[1]), A_ub=H, b_ub=h,
                  bounds=[(None, None)] * H.shape[1], method="highs")
    if res.status == 2:
        return False
    if res.status != 0:
        raise RuntimeError(f"feasibility LP failed: {res.message}")
    return True


class Polytope:
    """Nonempty polytope ``{x : H x <= h}``.

    Args:
        H: constraint normals, shape ``(q, d)``.
        h: offsets, shape ``(q,)``.
        contains_origin: require ``h >= 0``, i.e. the origin is a member.
        check: certify nonemptiness with one feasibility LP.
    """

    def __init__(self, H, h, *, contains_origin=False, check=True):
        H = np.atleast_2d(np.asarray(H, dtype=float))
        h = np.asarray(h, dtype=float).reshape(-1)
        if H.shape[0] != h.size:
            raise ValueError(f"H has {H.shape[0]} rows but h has {h.size} entries")
        if H.shape[0] < 1:
            raise ValueError("a polytope needs at least one constraint")
        if np.any(np.all(H == 0, axis=1)):
            raise ValueError("rows of H must be nonzero")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(h))):
            raise ValueError("H and h must be finite")
        if contains_origin and np.any(h < 0):
            raise ValueError("set flagged origin-containing but h has negative entries")
        H.setflags(write=False)
        h.setflags(write=False)
        self._H, self._h = H, h
        if check and not (contains_origin or _is_feasible(H, h)):
            raise EmptyPolytope("polytope is empty")

    H = property(lambda self: self._H)
    h = property(lambda self: self._h)

    @property
    def d(self):
        return self._H.shape[1]

    @property
    def q(self):
        return self._H.shape[0]

    def __repr__(self):
        return f"Polytope(d={self.d}, q={self.q})"

    def scaled(self, factor):
        """The set ``factor * P`` for ``factor >= 0``."""
        if factor < 0:
            raise ValueError("scale factor must be nonnegative")
        return Polytope(self._H, factor * self._h, check=False)

    def to_dict(self):
        return {"H": self._H.tolist(), "h": self._h.tolist()}


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        up = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != up.shape:
            raise ValueError("box bounds must have equal length")
        if np.any(lo > up):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @property
    def d(self):
        return self.lower.size

    def to_polytope(self) -> Polytope:
        eye = np.eye(self.d)
        return Polytope(np.vstack([eye, -eye]), np.concatenate([self.upper, -self.lower]),
                        check=False)

    def to_dict(self):
        return {"box": {"lower": self.lower.tolist(), "upper": self.upper.tolist()}}


def box(lower, upper) -> Polytope:
    return Box(lower, upper).to_polytope()


def from_dict(data) -> Polytope:
    """Parse ``{"H": ..., "h": ...}`` or ``{"box": {"lower": ..., "upper": ...}}``."""
    if "box" in data:
        return Box(data["box"]["lower"], data["box"]["upper"]).to_polytope()
    if "H" in data and "h" in data:
        return Polytope(data["H"], data["h"])
    raise ValueError("set must be given as {'H', 'h'} or {'box': {'lower', 'upper'}}")


def support(P: Polytope, c) -> float:
    """``max c^T x`` over ``P``."""
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.size != P.d:
        raise ValueError(f"direction has length {c.size}, polytope dimension is {P.d}")
    if not np.any(c):
        # any nonempty P gives 0; skip the LP
        return 0.0
    res = linprog(-c, A_ub=P.H, b_ub=P.h, bounds=[(None, None)] * P.d, method="highs")
    if res.status == 3:
        raise UnboundedDirection(f"polytope is unbounded in direction {c}")
    if res.status == 2:
        raise EmptyPolytope("polytope is empty")
    if res.status != 0:
        raise RuntimeError(f"support LP failed: {res.message}")
    return float(-res.fun)


def cartesian_power(P: Polytope, k: int) -> Polytope:
    """``P x ... x P`` (``k`` factors) with block-diagonal normals."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return Polytope(block_diag(*([P.H] * k)), np.tile(P.h, k), check=False)


def contains(P: Polytope, x, tol=MEMBERSHIP_TOL) -> bool:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != P.d:
        raise ValueError(f"point has length {x.size}, polytope dimension is {P.d}")
    return bool(np.all(P.H @ x <= P.h + tol))


def tightening_offsets(H, G, W: Polytope):
    """Row-wise support values ``support(W, G^T H_i^T)``."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    return np.array([support(W, G.T @ row) for row in np.atleast_2d(H)])


def tighten_by_support(P: Polytope, G, W: Polytope) -> Polytope:
    """Shrink ``P`` to ``{x : x + G w in P for all w in W}``.

    The result has the normals of ``P`` with offsets reduced by the support
    of ``G W`` along each normal.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if G.shape != (P.d, W.d):
        raise ValueError(f"G must be {P.d} x {W.d}, got {G.shape}")
    h = P.h - tightening_offsets(P.H, G, W)
    if not _is_feasible(P.H, h):
        raise EmptyTightenedSet("tightened set is empty")
    return Polytope(P.H, h, check=False)


def is_empty(H, h) -> bool:
    """Whether ``{x : H x <= h}`` is empty, by one feasibility LP."""
    return not _is_feasible(np.atleast_2d(H), np.ravel(h))


def vertices(P: Polytope) -> np.ndarray:
    """Vertex list of a bounded polytope (one vertex per row).

    One-dimensional sets and axis-aligned boxes (flat ones included) are
    handled by support LPs; other sets go through a half-space intersection
    around the Chebyshev centre and need a nonempty interior.
    """
    import itertools

    from scipy.spatial import HalfspaceIntersection

    if P.d == 1:
        return np.array([[-support(P, [-1.0])], [support(P, [1.0])]])
    if np.all(np.count_nonzero(P.H, axis=1) == 1):
        eye = np.eye(P.d)
        lo = [-support(P, -e) for e in eye]
        hi = [max(a, support(P, e)) for a, e in zip(lo, eye)]
        pts = np.array(list(itertools.product(*zip(lo, hi))))
        return np.unique(pts + 0.0, axis=0)
    norms = np.linalg.norm(P.H, axis=1)
    res = linprog(np.r_[np.zeros(P.d), -1.0], A_ub=np.c_[P.H, norms], b_ub=P.h,
                  bounds=[(None, None)] * P.d + [(0, None)], method="highs")
    if res.status != 0 or res.x[-1] <= 0:
        raise EmptyPolytope("polytope has no interior; vertices not enumerated")
    hs = HalfspaceIntersection(np.c_[P.H, -P.h], res.x[:-1])
    pts = hs.intersections
    # intersections repeat at degenerate vertices
    return np.unique(np.round(pts, 12), axis=0)
