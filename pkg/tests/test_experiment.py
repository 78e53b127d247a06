import json

import numpy as np
import pytest

from sltube.config import TOL_ENV
from sltube.controllers import benchmark_problem
from sltube.experiment import ConfigError, ExperimentConfig, ResultBundle
from sltube.qp import OsqpSolver


def bundled_dict():
    return ExperimentConfig.bundled().to_dict()


def cfg_from(d):
    return ExperimentConfig.from_text(json.dumps(d, indent=2))


def test_bundled_matches_benchmark():
    cfg = ExperimentConfig.bundled()
    prob, ref = cfg.problem(), benchmark_problem(0.05)
    for f in ("Q", "R"):
        assert np.array_equal(getattr(prob, f), getattr(ref, f))
    assert np.array_equal(prob.sys.A, ref.sys.A) and np.array_equal(prob.W.h, ref.W.h)
    assert prob.N == 10 and prob.n_dist == 10 and prob.Xf is not None
    assert cfg.controllers == ["df", "sltmpc", "tube"]


def test_round_trip_idempotent():
    cfg = ExperimentConfig.bundled()
    once = ExperimentConfig.from_text(cfg.dumps())
    twice = ExperimentConfig.from_text(once.dumps())
    assert once.data == cfg.data and once.dumps() == twice.dumps()


def test_malformed_json_reports_line():
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_text('{\n  "schema_version": 1,\n  "horizon": ,\n}')
    assert e.value.line == 3 and "malformed JSON" in str(e.value)


def test_schema_error_reports_line():
    text = json.dumps(bundled_dict(), indent=2).replace('"horizon": 10', '"horizon": "ten"')
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_text(text)
    assert "horizon" in str(e.value)
    assert text.splitlines()[e.value.line - 1].strip().startswith('"horizon"')


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("system"),
    lambda d: d.update(schema_version=2),
    lambda d: d.update(controllers=["mpc"]),
    lambda d: d.update(extra=1),
    lambda d: d["solver"].update(tol=1e-4),
    lambda d: d.update(x0=[0.0]),
    lambda d: d["system"].update(B=[[1.0, 0.0]]),
])
def test_invalid_configs_rejected(mutate):
    d = bundled_dict()
    mutate(d)
    with pytest.raises(ConfigError):
        cfg_from(d)


def test_bad_utf8(tmp_path):
    p = tmp_path / "c.json"
    p.write_bytes(b"\xff\xfe{")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_explicit_sets_and_terminal_variants():
    d = bundled_dict()
    d["disturbance"] = {"H": [[1, 0], [-1, 0], [0, 1], [0, -1]], "h": [0.05, 0.05, 0.1, 0.1]}
    d["terminal"] = {"nominal": None, "robust_set": {"box": {"lower": [-0.5, -0.5],
                                                             "upper": [0.5, 0.5]}},
                     "disturbance_blocks": "N-1"}
    d.pop("theta")
    prob = cfg_from(d).problem()
    assert not prob.origin_terminal and prob.n_dist == 9
    d["terminal"] = {"nominal": None}
    with pytest.raises(ConfigError):
        cfg_from(d)


def test_theta_override_and_gain():
    cfg = ExperimentConfig.bundled()
    assert cfg.disturbance(0.12).h[0] == pytest.approx(0.12)
    d = bundled_dict()
    d["tube_gain"] = [[-1.0, -0.3]]
    c = cfg_from(d)
    assert np.array_equal(c.tube_gain(c.problem()), [[-1.0, -0.3]])
    d["tube_gain"] = [[-1.0]]
    c = cfg_from(d)
    with pytest.raises(ConfigError):
        c.tube_gain(c.problem())


def test_solver_tol_precedence(monkeypatch):
    d = bundled_dict()
    d["solver"] = {"name": "osqp", "tol": 5e-9}
    c = cfg_from(d)
    assert isinstance(c.solver(), OsqpSolver) and c.solver().tol == 5e-9
    monkeypatch.setenv(TOL_ENV, "2e-9")
    assert c.solver().tol == 2e-9
    assert c.solver(1e-10).tol == 1e-10


def test_bundle_manifest_and_echo(tmp_path):
    raw = '{"schema_version": 1,\n' + ExperimentConfig.bundled().raw.split("\n", 1)[1]
    cfg = ExperimentConfig.from_text(raw)
    b = ResultBundle("test", cfg, tmp_path / "out", {"solver": "x"})
    b.path("a.txt").write_text("hello")
    b.add_file("a.txt")
    b.add_file("never_written.csv")
    body = json.loads(b.write().read_text())
    assert (tmp_path / "out" / "config_echo.json").read_bytes() == raw.encode()
    assert body["missing"] == ["never_written.csv"] and body["complete"] is False
    files = {m["file"] for m in body["manifest"]}
    assert files == {"a.txt", "config_echo.json"}
    assert body["toolkit_version"]
