"""Experiment configuration files and result bundles.

A config is a JSON document (schema version 1) describing the system, the
sets, the weights and the knobs of each experiment.  Validation happens
before anything is solved or written; errors carry the line of the offending
entry.
"""
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema
import numpy as np

from . import __version__
from .config import SOLVER_TOL, TOL_ENV, solver_tol
from .controllers import Kind, MpcProblem, lqr_gain, min_tightening_gain
from .horizon import LtiSystem
from .polytope import Polytope, from_dict
from .qp import ClarabelSolver, OsqpSolver
from .sim import theta_box

SCHEMA_VERSION = 1

_MATRIX = {"type": "array", "minItems": 1,
           "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}
_VECTOR = {"type": "array", "minItems": 1, "items": {"type": "number"}}
_SET = {
    "type": "object",
    "oneOf": [
        {"required": ["box"], "properties": {"box": {
            "type": "object", "required": ["lower", "upper"],
            "properties": {"lower": _VECTOR, "upper": _VECTOR}, "additionalProperties": False}}},
        {"required": ["H", "h"], "properties": {"H": _MATRIX, "h": _VECTOR}},
    ],
}
_KIND = {"enum": [k.value for k in Kind]}
_THETAS = {"type": "array", "items": {"type": "number", "minimum": 0}}

SCHEMA = {
    "type": "object",
    "required": ["schema_version", "system", "horizon", "weights", "constraints", "disturbance"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "system": {"type": "object", "required": ["A", "B"], "additionalProperties": False,
                   "properties": {"A": _MATRIX, "B": _MATRIX}},
        "horizon": {"type": "integer", "minimum": 2},
        "weights": {"type": "object", "required": ["Q", "R"], "additionalProperties": False,
                    "properties": {"Q": _MATRIX, "R": _MATRIX, "P": _MATRIX}},
        "constraints": {"type": "object", "required": ["X", "U"], "additionalProperties": False,
                        "properties": {"X": _SET, "U": _SET}},
        "disturbance": {
            "type": "object",
            "oneOf": [
                {"required": ["lower", "upper"],
                 "properties": {"lower": _VECTOR, "upper": _VECTOR,
                                "theta_axes": {"type": "array", "items": {"type": "integer",
                                                                          "minimum": 0}}},
                 "additionalProperties": False},
                {"required": ["H", "h"], "properties": {"H": _MATRIX, "h": _VECTOR},
                 "additionalProperties": False},
            ],
        },
        "theta": {"type": "number", "minimum": 0},
        "terminal": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "nominal": {"enum": ["origin", None]},
                "robust_set": {"oneOf": [{"const": "X"}, {"type": "null"}, _SET]},
                "disturbance_blocks": {"oneOf": [{"enum": ["N", "N-1"]},
                                                 {"type": "integer", "minimum": 1}]},
            },
        },
        "controllers": {"type": "array", "minItems": 1, "uniqueItems": True, "items": _KIND},
        "tube_gain": {"oneOf": [{"enum": ["lqr", "min_tightening"]}, _MATRIX]},
        "x0": _VECTOR,
        "montecarlo": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "runs": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "horizon": {"enum": ["policy", "receding"]},
                "T": {"type": ["integer", "null"], "minimum": 1},
                "sampling": {"enum": ["uniform", "vertices"]},
            },
        },
        "roa": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "thetas": _THETAS,
                "resolution": {"type": "integer", "minimum": 5},
                "sweep_thetas": _THETAS,
                "sweep_resolution": {"type": "integer", "minimum": 5},
            },
        },
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {"name": {"enum": ["clarabel", "osqp"]},
                           "tol": {"type": "number", "exclusiveMinimum": 0, "maximum": 1e-8}},
        },
        "output_dir": {"type": "string"},
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        loc = f"{path}:{line}: " if (path and line) else (f"line {line}: " if line else "")
        super().__init__(loc + message)
        self.line = line


def _line_of(text: str, json_path) -> Optional[int]:
    """Best-effort line of the entry at ``json_path`` in the raw text."""
    pos = 0
    for key in json_path:
        if isinstance(key, str):
            idx = text.find(f'"{key}"', pos)
            if idx < 0:
                break
            pos = idx + len(key) + 2
    return text.count("\n", 0, pos) + 1 if pos else None


@dataclass
class ExperimentConfig:
    """Parsed and validated experiment settings."""
    data: Dict
    raw: str = ""
    source: Optional[str] = None

    # -- loading

    @classmethod
    def from_text(cls, text: str, source=None) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON: {e.msg} (column {e.colno})", e.lineno, source)
        cfg = cls(data, text, source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_bytes().decode("utf-8")
        except UnicodeDecodeError:
            raise ConfigError("config is not valid UTF-8", path=str(path))
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror}", path=str(path))
        return cls.from_text(text, str(path))

    @classmethod
    def bundled(cls, name="paper_example.json") -> "ExperimentConfig":
        text = resources.files("sltube.data").joinpath(name).read_text()
        return cls.from_text(text, name)

    def validate(self):
        validator = jsonschema.Draft202012Validator(SCHEMA)
        errors = sorted(validator.iter_errors(self.data), key=lambda e: [str(p) for p in e.absolute_path])
        if errors:
            e = errors[0]
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {e.message}", _line_of(self.raw, list(e.absolute_path)),
                              self.source)
        try:
            self.problem()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), None, self.source) from exc
        x0 = self.data.get("x0")
        if x0 is not None and len(x0) != len(self.data["system"]["A"]):
            raise ConfigError("x0 length does not match the state dimension",
                              _line_of(self.raw, ["x0"]), self.source)

    # -- round trip

    def to_dict(self) -> Dict:
        return json.loads(json.dumps(self.data))

    def dumps(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    # -- accessors

    def get(self, section, key=None, default=None):
        val = self.data.get(section, {} if key else default)
        return val if key is None else val.get(key, default)

    @property
    def theta(self) -> Optional[float]:
        return self.data.get("theta")

    @property
    def controllers(self) -> List[str]:
        return list(self.data.get("controllers", [k.value for k in Kind]))

    def disturbance(self, theta=None) -> Polytope:
        d = self.data["disturbance"]
        if "H" in d:
            return Polytope(d["H"], d["h"])
        theta = self.theta if theta is None else theta
        axes = d.get("theta_axes", [])
        if axes and theta is None:
            raise ConfigError("theta is required when disturbance has theta_axes")
        return theta_box(d["lower"], d["upper"], tuple(axes))(theta if axes else 0.0)

    def problem(self, theta=None) -> MpcProblem:
        s = self.data
        sys = LtiSystem(np.array(s["system"]["A"], float), np.array(s["system"]["B"], float))
        X = from_dict(s["constraints"]["X"])
        U = from_dict(s["constraints"]["U"])
        W = self.disturbance(theta)
        term = s.get("terminal", {})
        N = int(s["horizon"])
        rob = term.get("robust_set")
        rob_set = X if rob == "X" else (from_dict(rob) if isinstance(rob, dict) else None)
        blocks = term.get("disturbance_blocks", "N-1")
        blocks = {"N": N, "N-1": N - 1}.get(blocks, blocks)
        w = s["weights"]
        P = None if "P" not in w else np.array(w["P"], float)
        if term.get("nominal", "origin") == "origin":
            return MpcProblem(sys, N, np.array(w["Q"], float), np.array(w["R"], float), X, U, W,
                              P, "origin", rob_set, blocks)
        if rob_set is None:
            raise ValueError("terminal needs a nominal origin pin or a robust set")
        return MpcProblem(sys, N, np.array(w["Q"], float), np.array(w["R"], float), X, U, W,
                          P, rob_set, None, blocks)

    def tube_gain(self, prob: MpcProblem):
        g = self.data.get("tube_gain", "lqr")
        if g == "lqr":
            return lqr_gain(prob.sys, prob.Q, prob.R)
        if g == "min_tightening":
            return min_tightening_gain(prob)
        K = np.array(g, float)
        if K.shape != (prob.m, prob.n):
            raise ConfigError(f"tube_gain must be {prob.m} x {prob.n}")
        return K

    def solver(self, tol=None):
        sv = self.data.get("solver", {})
        if tol is None:
            tol = solver_tol() if os.environ.get(TOL_ENV) else sv.get("tol", SOLVER_TOL)
        return (OsqpSolver if sv.get("name", "clarabel") == "osqp" else ClarabelSolver)(tol=tol)


@dataclass
class ResultBundle:
    """What a command produced: config echo, summaries and a file manifest."""
    command: str
    config: Optional[ExperimentConfig]
    out_dir: Path
    solver_settings: Dict = field(default_factory=dict)
    summaries: List[Dict] = field(default_factory=list)
    files: List[str] = field(default_factory=list)
    complete: bool = False
    notes: Dict = field(default_factory=dict)

    def path(self, name) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name

    def add_file(self, name):
        if name not in self.files:
            self.files.append(name)

    def write(self):
        """Write the config echo and ``bundle.json``; returns the bundle path."""
        if self.config is not None:
            # byte-identical copy of the input
            self.path("config_echo.json").write_bytes(self.config.raw.encode("utf-8"))
            self.add_file("config_echo.json")
        missing = [f for f in self.files if not (self.out_dir / f).exists()]
        body = {
            "command": self.command,
            "toolkit_version": __version__,
            "complete": self.complete and not missing,
            "solver": self.solver_settings,
            "summaries": self.summaries,
            "manifest": [{"file": f, "sha256": hashlib.sha256((self.out_dir / f).read_bytes())
                          .hexdigest()} for f in self.files if f not in missing],
            "missing": missing,
            "config_echo": None if self.config is None else self.config.raw,
            "notes": self.notes,
        }
        p = self.path("bundle.json")
        p.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return p
