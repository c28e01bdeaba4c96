"""Experiment configuration: one JSON document with strict key checking."""

from __future__ import annotations

import hashlib
import inspect
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import problems
from .inner import SolverConfig
from .linalg import Box


class ConfigError(ValueError):
    pass


PROBLEM_BUILDERS = {
    "sparse_coding": problems.gen_sparse_coding,
    "quadratic": problems.quadratic_oracle,
    "subspace": problems.subspace_case,
    "hypercleaning": problems.gen_hypercleaning,
}


def _box_from(spec) -> Box | None:
    if spec is None:
        return None
    if not isinstance(spec, dict) or set(spec) - {"lo", "hi"}:
        raise ConfigError(f"box must be an object with optional 'lo'/'hi', got {spec!r}")
    return Box(spec.get("lo"), spec.get("hi"))


def _box_to(box: Box | None):
    return None if box is None else box.as_dict()


@dataclass
class ReportOptions:
    per_inner_residuals: bool = False


@dataclass
class ExperimentConfig:
    problem: dict
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: str = "metrics.csv"
    report: ReportOptions = field(default_factory=ReportOptions)
    sweep: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.problem.get("seed", self.solver.seed))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        prob = dict(self.problem)
        if "seed" in inspect.signature(PROBLEM_BUILDERS[prob["kind"]]).parameters:
            prob["seed"] = int(seed)
        return ExperimentConfig(prob, self.solver.with_(seed=int(seed)), self.output, self.report,
                                dict(self.sweep))

    def to_dict(self) -> dict:
        solver = {f.name: getattr(self.solver, f.name) for f in fields(SolverConfig)}
        solver["u_box"] = _box_to(self.solver.u_box)
        solver["omega_box"] = _box_to(self.solver.omega_box)
        return {
            "problem": dict(self.problem),
            "solver": solver,
            "output": self.output,
            "report": asdict(self.report),
            "sweep": dict(self.sweep),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        allowed = {"problem", "solver", "output", "report", "sweep"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        if "problem" not in data:
            raise ConfigError("missing 'problem' block")
        problem = _check_problem(data["problem"])

        solver_raw = dict(data.get("solver") or {})
        names = {f.name for f in fields(SolverConfig)}
        unknown = set(solver_raw) - names
        if unknown:
            raise ConfigError(f"unknown solver keys: {sorted(unknown)}")
        try:
            if "u_box" in solver_raw:
                solver_raw["u_box"] = _box_from(solver_raw["u_box"]) or Box()
            if "omega_box" in solver_raw:
                solver_raw["omega_box"] = _box_from(solver_raw["omega_box"])
            solver = SolverConfig(**solver_raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid solver block: {exc}") from exc

        report_raw = data.get("report") or {}
        unknown = set(report_raw) - {"per_inner_residuals"}
        if unknown:
            raise ConfigError(f"unknown report keys: {sorted(unknown)}")
        report = ReportOptions(**report_raw)

        sweep = dict(data.get("sweep") or {})
        unknown = set(sweep) - {"mu_values"}
        if unknown:
            raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
        for mu in sweep.get("mu_values", []):
            if not 0.0 <= mu < 1.0:
                raise ConfigError(f"sweep mu value {mu} outside [0, 1)")

        output = data.get("output", "metrics.csv")
        if not isinstance(output, str) or not output:
            raise ConfigError("output must be a non-empty path string")
        return cls(problem, solver, output, report, sweep)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def _check_problem(block) -> dict:
    if not isinstance(block, dict) or "kind" not in block:
        raise ConfigError("problem block needs a 'kind'")
    kind = block["kind"]
    if kind not in PROBLEM_BUILDERS:
        raise ConfigError(f"unknown problem kind {kind!r}; choose from {sorted(PROBLEM_BUILDERS)}")
    accepted = set(inspect.signature(PROBLEM_BUILDERS[kind]).parameters) - {"trainable"}
    unknown = set(block) - accepted - {"kind", "trainable"}
    if unknown:
        raise ConfigError(f"unknown parameters for problem {kind!r}: {sorted(unknown)}")
    return dict(block)


def build_problem(problem: dict):
    kind = problem["kind"]
    kwargs = {k: v for k, v in problem.items() if k != "kind"}
    if "trainable" in kwargs and kwargs["trainable"] is not None:
        kwargs["trainable"] = set(kwargs["trainable"])
    for key in ("H", "c", "target", "u0", "omega_init"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = np.asarray(kwargs[key], dtype=np.float64)
    try:
        return PROBLEM_BUILDERS[kind](**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot build problem {kind!r}: {exc}") from exc
