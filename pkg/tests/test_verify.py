import numpy as np

from sltube.verify import FAULT_ENV, PROPERTIES, random_blt, random_system, run_suite
from sltube.slp import is_block_lower_triangular


def test_suite_all_pass():
    results = run_suite()
    assert len(results) >= 6
    for r in results:
        assert r.passed, r.line()
        assert r.max_residual <= r.tol <= 1e-6
        assert r.line().startswith("PASS")


def test_suite_is_deterministic():
    a = run_suite(only=["response.round_trip", "df.to_response"])
    b = run_suite(only=["response.round_trip", "df.to_response"])
    assert [r.max_residual for r in a] == [r.max_residual for r in b]
    assert [r.name for r in a] == ["response.round_trip", "df.to_response"]


def test_injected_fault_is_detected(monkeypatch):
    monkeypatch.setenv(FAULT_ENV, "response_from_controller")
    res = {r.name: r for r in run_suite(only=["response.round_trip", "horizon.neumann_identity"])}
    assert not res["response.round_trip"].passed
    assert res["response.round_trip"].counterexample is not None
    assert res["horizon.neumann_identity"].passed


def test_random_instances_in_range():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ops = random_system(rng)
        assert 1 <= ops.n <= 4 and 1 <= ops.m <= 3 and 2 <= ops.N <= 8
        assert is_block_lower_triangular(random_blt(rng, ops, strict=True), ops.m, ops.n,
                                         strict=True)
    assert all(trials >= 40 for _, _, trials, _ in PROPERTIES)
