"""Canonical convex QP container and solver back ends.

A :class:`QpSpec` describes::

    minimize    0.5 xi^T quad xi + lin^T xi + const
    subject to  eq_A xi = eq_b,  ineq_A xi <= ineq_b

Solvers are small objects with a ``solve(spec) -> SolveResult`` method.
Each call builds an independent solver context, so one solver object can
be shared between threads.
"""
import enum
import io
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
import scipy.sparse as sp

from .config import solver_tol


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    SOLVER_ERROR = "SolverError"


class SolverError(RuntimeError):
    """Numerical failure of the QP back end (not an infeasibility certificate)."""


class WrongStatus(RuntimeError):
    """A solution was requested from a result that is not optimal."""


@dataclass
class QpSpec:
    quad: sp.csc_matrix
    lin: np.ndarray
    eq_A: sp.csr_matrix
    eq_b: np.ndarray
    ineq_A: sp.csr_matrix
    ineq_b: np.ndarray
    const: float = 0.0
    var_map: Dict[str, slice] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        nv = self.lin.size
        if self.quad.shape != (nv, nv):
            raise ValueError("quad must be square and match lin")
        if self.eq_A.shape != (self.eq_b.size, nv) or self.ineq_A.shape != (self.ineq_b.size, nv):
            raise ValueError("constraint blocks do not match the variable count")

    @property
    def nvar(self):
        return self.lin.size

    def objective(self, xi):
        return float(0.5 * xi @ (self.quad @ xi) + self.lin @ xi + self.const)

    def residuals(self, xi):
        eq = self.eq_A @ xi - self.eq_b
        ineq = self.ineq_A @ xi - self.ineq_b
        return {"eq": float(np.max(np.abs(eq), initial=0.0)),
                "ineq": float(np.max(ineq, initial=0.0))}

    def unpack(self, xi):
        return {name: xi[sl] for name, sl in self.var_map.items()}

    def to_text(self) -> str:
        """Plain-text dump with dense blocks, for comparing solver inputs."""
        buf = io.StringIO()
        buf.write(f"# QpSpec nvar={self.nvar} neq={self.eq_b.size} nineq={self.ineq_b.size}\n")
        for name, sl in self.var_map.items():
            buf.write(f"slice {name} {sl.start} {sl.stop}\n")
        for label, arr in (("quad", self.quad.toarray()), ("lin", self.lin[None, :]),
                           ("eq_A", self.eq_A.toarray()), ("eq_b", self.eq_b[None, :]),
                           ("ineq_A", self.ineq_A.toarray()), ("ineq_b", self.ineq_b[None, :])):
            buf.write(f"[{label}] {arr.shape[0]} {arr.shape[1]}\n")
            np.savetxt(buf, arr, fmt="%.17g")
        buf.write(f"[const] {self.const!r}\n")
        return buf.getvalue()

    @classmethod
    def least_squares(cls, L, ell, eq_A, eq_b, ineq_A, ineq_b, **kw):
        """QP whose objective is ``||L xi + ell||^2``."""
        L = sp.csr_matrix(L)
        return cls(sp.csc_matrix(2.0 * (L.T @ L)), 2.0 * (L.T @ ell),
                   sp.csr_matrix(eq_A), np.asarray(eq_b, dtype=float),
                   sp.csr_matrix(ineq_A), np.asarray(ineq_b, dtype=float),
                   const=float(ell @ ell), **kw)


@dataclass
class SolveResult:
    status: Status
    objective: float = float("nan")
    xi: Optional[np.ndarray] = None
    variables: Dict[str, np.ndarray] = field(default_factory=dict)
    first_input: Optional[np.ndarray] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    spec: Optional[QpSpec] = field(default=None, repr=False)

    @property
    def optimal(self):
        return self.status is Status.OPTIMAL


class ClarabelSolver:
    """Interior-point back end (default).  Detects infeasibility with certificates."""

    name = "clarabel"

    def __init__(self, tol=None, max_iter=200):
        self.tol = solver_tol() if tol is None else float(tol)
        self.max_iter = max_iter

    def settings(self):
        return {"solver": self.name, "tol": self.tol, "max_iter": self.max_iter}

    def solve(self, spec: QpSpec) -> SolveResult:
        import clarabel

        st = clarabel.DefaultSettings()
        st.verbose = False
        st.max_iter = self.max_iter
        st.tol_feas = st.tol_gap_abs = st.tol_gap_rel = self.tol
        st.tol_infeas_abs = st.tol_infeas_rel = self.tol
        st.presolve_enable = False
        P = sp.triu(spec.quad, format="csc")
        A = sp.vstack([spec.eq_A, spec.ineq_A], format="csc")
        b = np.concatenate([spec.eq_b, spec.ineq_b])
        cones = []
        if spec.eq_b.size:
            cones.append(clarabel.ZeroConeT(spec.eq_b.size))
        if spec.ineq_b.size:
            cones.append(clarabel.NonnegativeConeT(spec.ineq_b.size))
        t0 = time.perf_counter()
        sol = clarabel.DefaultSolver(P, spec.lin, A, b, cones, st).solve()
        elapsed = time.perf_counter() - t0
        status = str(sol.status)
        diag = {"raw_status": status, "iterations": sol.iterations,
                "solve_time": elapsed, "settings": self.settings()}
        if status.endswith("Solved"):
            xi = np.array(sol.x)
            diag.update(spec.residuals(xi))
            diag["reduced_accuracy"] = status.startswith("Almost")
            return SolveResult(Status.OPTIMAL, spec.objective(xi), xi, spec.unpack(xi),
                               diagnostics=diag, spec=spec)
        if "PrimalInfeasible" in status:
            diag["reduced_accuracy"] = status.startswith("Almost")
            return SolveResult(Status.INFEASIBLE, diagnostics=diag, spec=spec)
        return SolveResult(Status.SOLVER_ERROR, diagnostics=diag, spec=spec)


class OsqpSolver:
    """First-order ADMM back end, used as an independent cross-check."""

    name = "osqp"

    def __init__(self, tol=None, max_iter=200000):
        self.tol = solver_tol() if tol is None else float(tol)
        self.max_iter = max_iter

    def settings(self):
        return {"solver": self.name, "tol": self.tol, "max_iter": self.max_iter}

    def solve(self, spec: QpSpec) -> SolveResult:
        import osqp

        A = sp.vstack([spec.eq_A, spec.ineq_A], format="csc")
        lower = np.concatenate([spec.eq_b, np.full(spec.ineq_b.size, -np.inf)])
        upper = np.concatenate([spec.eq_b, spec.ineq_b])
        model = osqp.OSQP()
        model.setup(P=sp.triu(spec.quad, format="csc"), q=spec.lin, A=A, l=lower, u=upper,
                    eps_abs=self.tol, eps_rel=self.tol, eps_prim_inf=1e-6, eps_dual_inf=1e-6,
                    max_iter=self.max_iter, polishing=True, verbose=False)
        t0 = time.perf_counter()
        res = model.solve()
        elapsed = time.perf_counter() - t0
        status = str(res.info.status)
        diag = {"raw_status": status, "iterations": res.info.iter,
                "solve_time": elapsed, "settings": self.settings()}
        if status.startswith("solved"):
            xi = np.array(res.x)
            diag.update(spec.residuals(xi))
            diag["reduced_accuracy"] = status != "solved"
            return SolveResult(Status.OPTIMAL, spec.objective(xi), xi, spec.unpack(xi),
                               diagnostics=diag, spec=spec)
        if status.startswith("primal infeasible"):
            return SolveResult(Status.INFEASIBLE, diagnostics=diag, spec=spec)
        return SolveResult(Status.SOLVER_ERROR, diagnostics=diag, spec=spec)


def solve(spec: QpSpec, solver=None) -> SolveResult:
    """Solve ``spec`` with ``solver`` (a fresh :class:`ClarabelSolver` by default)."""
    return (solver or ClarabelSolver()).solve(spec)


class AffineQpTemplate:
    """QP family whose data is affine in a parameter vector ``p``.

    ``build(p)`` must return ``(L, ell, eq_A, eq_b, ineq_A, ineq_b, var_map)``
    with every entry affine in ``p``; the least-squares cost factor
    ``(L, ell)`` hence gives a quadratic objective.  The family is sampled at
    ``p = 0`` and the unit vectors once, after which :meth:`instantiate` only
    forms sparse linear combinations.
    """

    def __init__(self, build, dim, meta=None):
        base = build(np.zeros(dim))
        self.var_map = base[-1]
        self.meta = dict(meta or {})
        self._base = [self._canon(x) for x in base[:-1]]
        self._dirs = []
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = 1.0
            sample = build(e)
            self._dirs.append([self._canon(s) - b for s, b in zip(sample[:-1], self._base)])
        self._dirs = [[d.tocsr() if sp.issparse(d) else d for d in parts] for parts in self._dirs]
        for parts in self._dirs:
            for k, d in enumerate(parts):
                if sp.issparse(d):
                    d.eliminate_zeros()

    @staticmethod
    def _canon(x):
        return sp.csr_matrix(x) if sp.issparse(x) else np.asarray(x, dtype=float)

    def instantiate(self, p, with_cost=True, meta=None) -> QpSpec:
        parts = list(self._base)
        for coef, dirs in zip(np.ravel(p), self._dirs):
            if coef != 0.0:
                parts = [a + coef * d for a, d in zip(parts, dirs)]
        L, ell, eq_A, eq_b, ineq_A, ineq_b = parts
        info = dict(self.meta, **(meta or {}))
        if with_cost:
            return QpSpec.least_squares(L, ell, eq_A, eq_b, ineq_A, ineq_b,
                                        var_map=self.var_map, meta=info)
        nv = eq_A.shape[1]
        return QpSpec(sp.csc_matrix((nv, nv)), np.zeros(nv), sp.csr_matrix(eq_A), eq_b,
                      sp.csr_matrix(ineq_A), ineq_b, var_map=self.var_map, meta=info)
