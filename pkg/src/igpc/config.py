"""Experiment configuration for the benchmark runner.

Configs are JSON documents validated against :data:`CONFIG_SCHEMA`.  Unknown
keys are rejected at every level, and ``ExperimentConfig.from_dict(c.to_dict())``
reproduces ``c`` exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field

import jsonschema

from .disturbances import KINDS
from .dynamics import ConfigError
from .environments import ENVIRONMENTS, make_environment
from .gpc import GPCParams
from .planner import MODES, LineSearch

_NUMBER = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "igpc experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["environment", "disturbance", "agents", "N", "seeds"],
    "properties": {
        "name": {"type": "string"},
        "environment": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": list(ENVIRONMENTS)},
                "params": {"type": "object"},
            },
        },
        "disturbance": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "magnitudes"],
            "properties": {
                "kind": {"enum": [k for k in KINDS if k != "custom_sequence"]},
                "magnitudes": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
                "params": {"type": "object"},
            },
        },
        "agents": {
            "type": "array",
            "minItems": 1,
            "uniqueItems": True,
            "items": {"enum": list(MODES)},
        },
        "N": _POS_INT,
        "seeds": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"type": "integer", "minimum": 0}},
        "gpc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "L": _POS_INT,
                "S": _POS_INT,
                "eta_in": {"type": "number", "minimum": 0},
                "gamma": {"type": "number", "minimum": 0},
            },
        },
        "line_search": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha_plus": {"type": "number", "exclusiveMinimum": 0},
                "shrink": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_trials": {"type": "integer", "minimum": 0},
            },
        },
        "alpha_grid": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "budget": {"type": ["integer", "null"], "minimum": 1},
        "threshold": {"type": ["number", "null"]},
        "threshold_factor": {"type": "number", "minimum": 1},
        "ilqg_score_on_real": {"type": "boolean"},
        "output_dir": {"type": "string"},
    },
}


@dataclass
class ExperimentConfig:
    """One experiment: every agent runs on every (magnitude, seed) cell.

    ``threshold`` is the loss level for rollouts-to-threshold.  When it is
    null the threshold of a magnitude is ``threshold_factor`` times the best
    median terminal cost among the agents at that magnitude.
    """

    environment: dict
    disturbance: dict
    agents: list
    N: int
    seeds: list
    name: str = "experiment"
    gpc: dict = field(default_factory=lambda: {"L": 3, "S": 3, "eta_in": 1e-2, "gamma": 1.0})
    line_search: dict = field(default_factory=lambda: {"alpha_plus": 1.0, "shrink": 0.5, "max_trials": 8})
    alpha_grid: list = field(default_factory=lambda: [0.25, 0.5, 1.0])
    budget: int | None = None
    threshold: float | None = None
    threshold_factor: float = 1.1
    ilqg_score_on_real: bool = True
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        validate(data)
        data = copy.deepcopy(data)
        data["environment"].setdefault("params", {})
        data["disturbance"].setdefault("params", {})
        cfg = cls(**data)
        cfg.gpc = {**cls.__dataclass_fields__["gpc"].default_factory(), **cfg.gpc}
        cfg.line_search = {**cls.__dataclass_fields__["line_search"].default_factory(), **cfg.line_search}
        cfg.gpc_params()
        cfg.line_search_params()
        cfg._check_buildable()
        return cfg

    def _check_buildable(self) -> None:
        """Fail at load time, not mid-run, on bad environment or disturbance parameters."""
        env = make_environment(self.environment["name"], **self.environment["params"])
        try:
            env.disturbance(self.disturbance["kind"], self.disturbance["magnitudes"][0], **self.disturbance["params"])
        except TypeError as exc:
            raise ConfigError(f"bad disturbance parameters: {exc}") from None

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON, ignoring where output goes."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def gpc_params(self) -> GPCParams:
        return GPCParams(**self.gpc)

    def line_search_params(self, alpha_plus: float | None = None) -> LineSearch:
        ls = dict(self.line_search)
        if alpha_plus is not None:
            ls["alpha_plus"] = alpha_plus
        return LineSearch(**ls)


def validate(data) -> None:
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentConfig.from_dict(data)


def save_config(path, config: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        fh.write(config.to_json())


# --- the default grid ------------------------------------------------------

_DI = {"name": "double_integrator", "params": {"T": 100, "stabilizer": [[0.5, 1.0]]}}
_AGENTS = ["ilqg", "ilc", "igpc", "ilqr_oracle"]


def default_grid(seeds=(0, 1, 2, 3, 4), N: int = 20) -> list:
    """Nine panels: three double-integrator perturbations, three wind
    magnitudes on the quadrotor, three impulse magnitudes on the reacher.

    Magnitudes are implementation choices picked so the agent orderings are
    visible at desk scale.
    """
    seeds = list(seeds)
    gpc_di = {"L": 3, "S": 3, "eta_in": 0.2, "gamma": 1.0}
    gpc_nl = {"L": 3, "S": 3, "eta_in": 0.05, "gamma": 1.0}
    panels = [
        ("di_constant", _DI, {"kind": "constant_offset", "magnitudes": [0.1]}, gpc_di),
        ("di_growing", _DI, {"kind": "rollout_growing_offset", "magnitudes": [0.02]}, gpc_di),
        ("di_sinusoid", _DI, {"kind": "phase_shifted_sinusoid", "magnitudes": [0.1]}, gpc_di),
        ("quadrotor_wind",
         {"name": "planar_quadrotor", "params": {"T": 100, "frame": "goal"}},
         {"kind": "wind_field", "magnitudes": [2.0, 4.0, 8.0]}, gpc_nl),
        ("reacher_impulse",
         {"name": "reacher_2dof", "params": {"T": 100}},
         {"kind": "periodic_impulse", "magnitudes": [0.5, 1.0, 2.0]}, gpc_nl),
    ]
    out = []
    for name, env, dist, gpc in panels:
        out.append(ExperimentConfig.from_dict({
            "name": name,
            "environment": copy.deepcopy(env),
            "disturbance": copy.deepcopy(dist),
            "agents": list(_AGENTS),
            "N": N,
            "seeds": seeds,
            "gpc": dict(gpc),
            "output_dir": f"runs/{name}",
        }))
    return out
