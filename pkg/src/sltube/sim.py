"""Receding-horizon simulation, Monte-Carlo cost studies and RoA grids.

Work items (runs, grid cells) are independent.  With ``workers > 1`` they go
to a process pool whose workers each build their own controller; results are
always reduced in item order, so statistics do not depend on the pool size.
"""
import csv
import enum
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .config import VIOLATION_TOL
from .controllers import Kind, MpcController, MpcProblem
from .polytope import Polytope, box, contains, support, vertices
from .qp import Status


class InfeasibleAtStep(RuntimeError):
    def __init__(self, step, status):
        super().__init__(f"controller has no feasible solution at step {step} ({status})")
        self.step = step
        self.status = status


class SampleMode(str, enum.Enum):
    UNIFORM = "uniform"
    VERTICES = "vertices"


class DisturbanceSampler:
    """Seeded disturbance draws from a polytope.

    ``uniform`` samples the bounding box and rejects points outside the set
    (no rejection happens for boxes); ``vertices`` picks vertices uniformly.
    """

    def __init__(self, W: Polytope, seed=0, mode="uniform"):
        self.W = W
        self.mode = SampleMode(mode)
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        eye = np.eye(W.d)
        self.lo = np.array([-support(W, -e) for e in eye])
        # LP round-off can put lo a hair above hi for flat sets
        self.hi = np.maximum(self.lo, np.array([support(W, e) for e in eye]))
        self.span = self.hi - self.lo
        self._verts = vertices(W) if self.mode is SampleMode.VERTICES else None

    def draw(self) -> np.ndarray:
        if self.mode is SampleMode.VERTICES:
            return self._verts[self.rng.integers(len(self._verts))].copy()
        for _ in range(10000):
            w = self.lo + self.span * self.rng.random(self.lo.size)
            if contains(self.W, w):
                return w
        raise RuntimeError("rejection sampling failed; the set is too thin")


@dataclass
class ClosedLoopTrace:
    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    stage_costs: np.ndarray
    total_cost: float
    violations: List[tuple] = field(default_factory=list)

    def to_rows(self):
        T = len(self.inputs)
        for k in range(T + 1):
            u = self.inputs[k] if k < T else [math.nan] * self.inputs.shape[1]
            w = self.disturbances[k] if k < T else [math.nan] * self.states.shape[1]
            c = self.stage_costs[k] if k < T else math.nan
            yield [k, *self.states[k], *u, *w, c]


def _violations(prob: MpcProblem, x, u, k, tol):
    out = []
    for name, H, h, val in (("x", prob.X.H, prob.X.h, x), ("u", prob.U.H, prob.U.h, u)):
        if val is None:
            continue
        ex = H @ val - h
        out += [(k, f"{name}{r}", float(e)) for r, e in enumerate(ex) if e > tol]
    return out


def closed_loop(kind, prob: MpcProblem, x0, T=None, sampler: Optional[DisturbanceSampler] = None,
                controller: Optional[MpcController] = None, K=None, tol=VIOLATION_TOL):
    """Run the controller in receding horizon for ``T`` steps (default ``2N``).

    ``sampler=None`` means ``w = 0``.  Raises :class:`InfeasibleAtStep` when a
    solve is not optimal; constraint excesses beyond ``tol`` are recorded.
    """
    ctrl = controller or MpcController(prob, kind, K=K)
    T = 2 * prob.N if T is None else int(T)
    n, m = prob.n, prob.m
    xs = np.zeros((T + 1, n))
    us = np.zeros((T, m))
    ws = np.zeros((T, n))
    costs = np.zeros(T)
    xs[0] = np.ravel(x0)
    viol = []
    for k in range(T):
        res = ctrl.solve(xs[k])
        if not res.optimal:
            raise InfeasibleAtStep(k, res.status.value)
        us[k] = res.first_input
        if sampler is not None:
            ws[k] = sampler.draw()
        costs[k] = prob.stage_cost(xs[k], us[k])
        viol += _violations(prob, xs[k], us[k], k, tol)
        xs[k + 1] = prob.sys.A @ xs[k] + prob.sys.B @ us[k] + ws[k]
    viol += _violations(prob, xs[T], None, T, tol)
    return ClosedLoopTrace(xs, us, ws, costs, math.fsum(costs), viol)


# ------------------------------------------------------------------ worker pool

_WORKER = {}


def _init_worker(prob, kind, K):
    _WORKER["ctrl"] = MpcController(prob, kind, K=K)


def _map(fn, items, prob, kind, K, workers):
    """Ordered map over work items, in process or on a pool."""
    if workers is None or workers <= 1:
        _WORKER.clear()
        ctrl = MpcController(prob, kind, K=K)
        _WORKER["ctrl"] = ctrl
        return [fn(it) for it in items]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(prob, kind, K)) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _mc_run(item):
    prob, x0, T, seed, sampling = item
    sampler = DisturbanceSampler(prob.W, seed, sampling)
    try:
        tr = closed_loop(None, prob, x0, T, sampler, controller=_WORKER["ctrl"])
        return tr, None
    except InfeasibleAtStep as e:
        return None, e.step


def policy_rollout(ctrl: MpcController, res, sampler: Optional[DisturbanceSampler] = None,
                   tol=VIOLATION_TOL) -> ClosedLoopTrace:
    """Apply the feedback policy of one optimal solve over its own horizon.

    Inputs come from the extracted policy evaluated on the drawn
    disturbances; states are propagated step by step with the true model, so
    the trace satisfies the same recursion as :func:`closed_loop`.
    """
    from .controllers import predict

    prob = ctrl.prob
    N, n, m = prob.N, prob.n, prob.m
    x0 = res.spec.meta["x0"]
    pol = ctrl.extract_policy(res)
    ws = np.zeros((N, n))
    if sampler is not None:
        for k in range(N):
            ws[k] = sampler.draw()
    _, u = predict(ctrl, pol, x0, ws.ravel())
    us = u.reshape(N + 1, m)[:N].copy()
    xs = np.zeros((N + 1, n))
    xs[0] = x0
    costs = np.zeros(N)
    viol = []
    for k in range(N):
        costs[k] = prob.stage_cost(xs[k], us[k])
        viol += _violations(prob, xs[k], us[k], k, tol)
        xs[k + 1] = prob.sys.A @ xs[k] + prob.sys.B @ us[k] + ws[k]
    if prob.Xf is not None:
        ex = prob.Xf.H @ xs[N] - prob.Xf.h
        viol += [(N, f"xf{r}", float(e)) for r, e in enumerate(ex) if e > tol]
    return ClosedLoopTrace(xs, us, ws, costs, math.fsum(costs), viol)


@dataclass
class MonteCarloResult:
    controller: str
    theta: Optional[float]
    runs: int
    seed: int
    mean_cost: float
    std_cost: float
    violations: int
    failures: int
    costs: np.ndarray
    traces: list

    def summary(self):
        return {"controller": self.controller, "theta": self.theta,
                "mean_cost": self.mean_cost, "std_cost": self.std_cost,
                "violations": self.violations, "runs": self.runs, "seed": self.seed,
                "failures": self.failures}


def run_seeds(seed, n_runs):
    """Per-run integer seeds derived from one master seed."""
    ss = np.random.SeedSequence(seed).spawn(n_runs)
    return [int(s.generate_state(1)[0]) for s in ss]


def monte_carlo(kind, prob: MpcProblem, x0, T=None, n_runs=100, seed=0, K=None,
                sampling="uniform", workers=1, theta=None, keep_traces=False,
                horizon="policy"):
    """Cost statistics over ``n_runs`` seeded disturbance realizations.

    ``horizon="policy"`` solves once at ``x0`` and applies the optimised
    feedback policy for ``N`` steps under each realization.
    ``horizon="receding"`` re-solves at every step for ``T`` steps
    (default ``2N``).  Every controller sees the same disturbance stream for
    a given run index.  Runs that lose feasibility are counted in
    ``failures`` and left out of the statistics.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if horizon not in ("policy", "receding"):
        raise ValueError("horizon must be 'policy' or 'receding'")
    x0 = np.ravel(np.asarray(x0, dtype=float))
    seeds = run_seeds(seed, n_runs)
    if horizon == "policy":
        ctrl = MpcController(prob, kind, K=K)
        res = ctrl.solve(x0)
        if not res.optimal:
            out = [(None, 0)] * n_runs
        else:
            out = [(policy_rollout(ctrl, res, DisturbanceSampler(prob.W, s, sampling)), None)
                   for s in seeds]
    else:
        T = 2 * prob.N if T is None else int(T)
        items = [(prob, x0, T, s, sampling) for s in seeds]
        out = _map(_mc_run, items, prob, kind, K, workers)
    traces = [tr for tr, _ in out if tr is not None]
    costs = np.array([tr.total_cost for tr in traces])
    if len(costs):
        mean = math.fsum(costs) / len(costs)
        std = math.sqrt(math.fsum((c - mean) ** 2 for c in costs) / len(costs))
    else:
        mean = std = math.nan
    return MonteCarloResult(Kind(kind).value, theta, n_runs, seed, mean, std,
                            sum(len(tr.violations) for tr in traces),
                            sum(1 for tr, _ in out if tr is None), costs,
                            traces if keep_traces else [])


# ------------------------------------------------------------------ region of attraction


class CellStatus(str, enum.Enum):
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    SOLVER_ERROR = "SolverError"


@dataclass
class RoaGrid:
    resolution: int
    centers: np.ndarray
    cells: List[CellStatus]
    controller: str = ""
    theta: Optional[float] = None

    @property
    def feasible(self):
        return np.array([c is CellStatus.FEASIBLE for c in self.cells])

    @property
    def n_errors(self):
        return sum(c is CellStatus.SOLVER_ERROR for c in self.cells)

    @property
    def coverage_percent(self):
        valid = len(self.cells) - self.n_errors
        return 100.0 * int(self.feasible.sum()) / valid if valid else math.nan

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([f"x{i + 1}" for i in range(self.centers.shape[1])] + ["status"])
            for c, s in zip(self.centers, self.cells):
                w.writerow([repr(float(v)) for v in c] + [s.value])


def grid_centers(X: Polytope, resolution: int) -> np.ndarray:
    """Cell centres of a ``resolution^n`` grid over the bounding box of ``X``,
    keeping only centres inside ``X`` (all of them when ``X`` is a box)."""
    eye = np.eye(X.d)
    lo = np.array([-support(X, -e) for e in eye])
    hi = np.array([support(X, e) for e in eye])
    axes = [lo[i] + (np.arange(resolution) + 0.5) * (hi[i] - lo[i]) / resolution
            for i in range(X.d)]
    pts = np.array(list(itertools.product(*axes)))
    return pts[[contains(X, p) for p in pts]]


def _cell(x):
    res = _WORKER["ctrl"].solve(x, feasibility_only=True)
    if res.status is Status.OPTIMAL:
        return CellStatus.FEASIBLE
    if res.status is Status.INFEASIBLE:
        return CellStatus.INFEASIBLE
    return CellStatus.SOLVER_ERROR


def roa_estimate(kind, prob: MpcProblem, resolution=50, workers=1, K=None, theta=None) -> RoaGrid:
    """First-step feasibility at every grid cell centre inside ``X``."""
    if resolution < 5:
        raise ValueError("resolution must be at least 5")
    pts = grid_centers(prob.X, resolution)
    cells = _map(_cell, list(pts), prob, kind, K, workers)
    return RoaGrid(resolution, pts, cells, Kind(kind).value, theta)


def theta_box(lower, upper, axes=(0,)):
    """Map ``theta -> box`` where the listed axes become ``[-theta, theta]``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)

    def make(theta):
        lo, hi = lower.copy(), upper.copy()
        lo[list(axes)] = -theta
        hi[list(axes)] = theta
        return box(lo, hi)
    return make


def theta_sweep(kind, prob: MpcProblem, thetas: Sequence[float], resolution=30,
                disturbance: Callable[[float], Polytope] = None, workers=1,
                gain: Callable[[MpcProblem], np.ndarray] = None, early_stop=True):
    """Coverage as a function of ``theta``.

    ``disturbance`` maps ``theta`` to ``W`` (default: first axis of the
    current ``W`` replaced by ``[-theta, theta]``).  ``gain`` computes the
    tube gain for each ``theta``.  With ``early_stop`` the sweep stops solving
    once coverage hits zero; the remaining entries are reported as zero with
    ``skipped=True`` (feasible sets only shrink as ``W`` grows).
    """
    thetas = [float(t) for t in thetas]
    if any(b < a for a, b in zip(thetas, thetas[1:])):
        raise ValueError("theta values must be sorted ascending")
    if disturbance is None:
        eye = np.eye(prob.n)
        lo = [-support(prob.W, -e) for e in eye]
        hi = [support(prob.W, e) for e in eye]
        disturbance = theta_box(lo, hi, (0,))
    curve, zero = [], False
    for th in thetas:
        if zero and early_stop:
            curve.append({"theta": th, "coverage": 0.0, "skipped": True})
            continue
        p = prob.with_disturbance(disturbance(th))
        K = gain(p) if (gain is not None and Kind(kind) is Kind.TUBE) else None
        g = roa_estimate(kind, p, resolution, workers, K=K, theta=th)
        curve.append({"theta": th, "coverage": g.coverage_percent, "skipped": False,
                      "solver_errors": g.n_errors})
        zero = g.coverage_percent == 0.0
    return curve


def zero_threshold(curve):
    """Smallest swept ``theta`` with zero coverage, or ``None``."""
    for row in curve:
        if row["coverage"] == 0.0:
            return row["theta"]
    return None


# ------------------------------------------------------------------ persistence


def trace_csv(trace: ClosedLoopTrace, path):
    n, m = trace.states.shape[1], trace.inputs.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
                   + [f"w{i + 1}" for i in range(n)] + ["stage_cost"])
        for row in trace.to_rows():
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
