import csv

import numpy as np
import pytest

from sltube.controllers import MpcController, min_tightening_gain, benchmark_problem
from sltube.polytope import Polytope, box, contains
from sltube.sim import (CellStatus, DisturbanceSampler, InfeasibleAtStep, RoaGrid, closed_loop,
                        grid_centers, monte_carlo, policy_rollout, roa_estimate, run_seeds,
                        theta_box, theta_sweep, trace_csv, zero_threshold)

from conftest import X0_BENCH


def zero_w_problem():
    return benchmark_problem(0.0).with_disturbance(box([0.0, 0.0], [0.0, 0.0]))


@pytest.mark.parametrize("kind", ["df", "tube", "sltmpc"])
def test_zero_state_zero_noise_trace(kind):
    prob = zero_w_problem()
    tr = closed_loop(kind, prob, np.zeros(2), T=5, sampler=DisturbanceSampler(prob.W, 0))
    assert np.max(np.abs(tr.states)) <= 1e-7 and np.max(np.abs(tr.inputs)) <= 1e-7
    assert tr.total_cost <= 1e-12 and tr.violations == []


def test_closed_loop_recursion_and_cost():
    prob = benchmark_problem(0.05)
    tr = closed_loop("sltmpc", prob, X0_BENCH, T=4, sampler=DisturbanceSampler(prob.W, 3))
    A, B = prob.sys.A, prob.sys.B
    for k in range(4):
        assert np.array_equal(tr.states[k + 1], A @ tr.states[k] + B @ tr.inputs[k]
                              + tr.disturbances[k])
        assert contains(prob.W, tr.disturbances[k])
    assert tr.total_cost == pytest.approx(tr.stage_costs.sum())
    assert len(list(tr.to_rows())) == 5


def test_closed_loop_default_length():
    prob = zero_w_problem()
    assert closed_loop("tube", prob, X0_BENCH).inputs.shape == (20, 1)


def test_infeasible_start_raises():
    with pytest.raises(InfeasibleAtStep) as e:
        closed_loop("df", benchmark_problem(0.05), [3.0, 3.0], T=2)
    assert e.value.step == 0 and e.value.status == "Infeasible"


def test_sampler_modes_and_determinism():
    W = box([-0.05, -0.1], [0.05, 0.1])
    a = [DisturbanceSampler(W, 5).draw() for _ in range(3)]
    s1, s2 = DisturbanceSampler(W, 5), DisturbanceSampler(W, 5)
    assert all(np.array_equal(s1.draw(), s2.draw()) for _ in range(20))
    v = DisturbanceSampler(W, 1, "vertices")
    for _ in range(20):
        assert np.allclose(np.abs(v.draw()), [0.05, 0.1])
    tri = Polytope([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], [1.0, 0.0, 0.0])
    s = DisturbanceSampler(tri, 0)
    assert all(contains(tri, s.draw()) for _ in range(100))
    with pytest.raises(ValueError):
        DisturbanceSampler(W, 0, "gaussian")
    assert a


def test_run_seeds_are_stable():
    assert run_seeds(7, 4) == run_seeds(7, 4)
    assert len(set(run_seeds(7, 50))) == 50
    assert run_seeds(7, 3) == run_seeds(7, 10)[:3]


def test_policy_rollout_without_noise_matches_prediction():
    prob = benchmark_problem(0.05)
    ctrl = MpcController(prob, "sltmpc")
    res = ctrl.solve(X0_BENCH)
    tr = policy_rollout(ctrl, res)
    assert tr.total_cost == pytest.approx(res.objective, rel=1e-7)
    assert tr.states.shape == (11, 2)
    assert np.max(np.abs(tr.states[-1])) <= 1e-7


def test_monte_carlo_deterministic_and_seed_sensitive():
    prob = benchmark_problem(0.05)
    a = monte_carlo("df", prob, X0_BENCH, n_runs=20, seed=3)
    b = monte_carlo("df", prob, X0_BENCH, n_runs=20, seed=3)
    c = monte_carlo("df", prob, X0_BENCH, n_runs=20, seed=4)
    assert np.array_equal(a.costs, b.costs) and a.mean_cost == b.mean_cost
    assert not np.array_equal(a.costs, c.costs)
    assert a.violations == 0 and a.failures == 0
    assert set(a.summary()) == {"controller", "theta", "mean_cost", "std_cost", "violations",
                                "runs", "seed", "failures"}
    assert a.std_cost == pytest.approx(np.std(a.costs))


def test_monte_carlo_receding_and_workers():
    prob = benchmark_problem(0.05)
    K = min_tightening_gain(prob)
    one = monte_carlo("tube", prob, X0_BENCH, T=4, n_runs=3, seed=1, K=K, horizon="receding")
    two = monte_carlo("tube", prob, X0_BENCH, T=4, n_runs=3, seed=1, K=K, horizon="receding",
                      workers=2)
    assert one.failures == 0 and np.array_equal(one.costs, two.costs)


def test_monte_carlo_counts_failures():
    r = monte_carlo("tube", benchmark_problem(0.05), X0_BENCH, n_runs=4, seed=0)  # LQR gain
    assert r.failures == 4 and np.isnan(r.mean_cost)
    with pytest.raises(ValueError):
        monte_carlo("df", benchmark_problem(0.05), X0_BENCH, n_runs=0)
    with pytest.raises(ValueError):
        monte_carlo("df", benchmark_problem(0.05), X0_BENCH, horizon="forever")


def test_grid_centers_box_and_polytope():
    pts = grid_centers(box([-1, -1], [1, 1]), 5)
    assert pts.shape == (25, 2) and np.allclose(pts.min(axis=0), -0.8)
    tri = Polytope([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], [1.0, 0.0, 0.0])
    assert len(grid_centers(tri, 10)) == 55


def test_coverage_excludes_solver_errors(tmp_path):
    F, I, E = CellStatus.FEASIBLE, CellStatus.INFEASIBLE, CellStatus.SOLVER_ERROR
    g = RoaGrid(5, np.zeros((4, 2)), [F, I, E, F])
    assert g.coverage_percent == pytest.approx(200 / 3)
    assert g.n_errors == 1
    g.write_csv(tmp_path / "g.csv")
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows[0] == ["x1", "x2", "status"] and rows[3][2] == "SolverError"
    assert np.isnan(RoaGrid(5, np.zeros((1, 2)), [E]).coverage_percent)


def test_roa_small_grid():
    prob = benchmark_problem(0.05)
    g = roa_estimate("df", prob, 6)
    assert len(g.cells) == 36 and g.n_errors == 0
    assert 0 < g.coverage_percent < 100
    with pytest.raises(ValueError):
        roa_estimate("df", prob, 4)


def test_theta_sweep_early_stop():
    prob = benchmark_problem(0.05)
    curve = theta_sweep("sltmpc", prob, [0.1, 0.5, 0.6], resolution=5)
    assert curve[1]["coverage"] == 0.0 and not curve[1]["skipped"]
    assert curve[2]["skipped"]
    assert zero_threshold(curve) == 0.5
    assert zero_threshold([{"theta": 0.1, "coverage": 5.0}]) is None
    with pytest.raises(ValueError):
        theta_sweep("df", prob, [0.2, 0.1])


def test_theta_box():
    W = theta_box([-1, -0.1], [1, 0.1], (0,))(0.05)
    assert np.allclose(W.h, [0.05, 0.1, 0.05, 0.1])


def test_trace_csv(tmp_path):
    prob = zero_w_problem()
    tr = closed_loop("df", prob, X0_BENCH, T=3)
    trace_csv(tr, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["step", "x1", "x2", "u1", "w1", "w2", "stage_cost"]
    assert len(rows) == 5 and rows[-1][3] == "nan"
