"""Numerical tolerances shared across the toolkit."""
import os

#: tolerance for structural identities (subspace residuals, round trips)
STRUCTURAL_TOL = 1e-8
#: tolerance for exact equalities built from finite sums of products
EQUALITY_TOL = 1e-10
#: default membership tolerance for polytopes
MEMBERSHIP_TOL = 1e-9
#: primal/dual feasibility and gap tolerance handed to the QP solver
SOLVER_TOL = 1e-8
#: worst-case replay margin counted as a constraint violation
VIOLATION_TOL = 1e-6

TOL_ENV = "SLTUBE_SOLVER_TOL"


def solver_tol() -> float:
    """Solver tolerance, overridable through ``SLTUBE_SOLVER_TOL``."""
    raw = os.environ.get(TOL_ENV)
    if raw is None:
        return SOLVER_TOL
    value = float(raw)
    if not value > 0:
        raise ValueError(f"SLTUBE_SOLVER_TOL must be positive, got {raw!r}")
    return value
