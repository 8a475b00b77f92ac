"""Experiment configuration: JSON documents with a versioned ``"schema": 1`` field."""

from __future__ import annotations

import copy
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from .objectives import ProblemSpec

__all__ = ["ConfigError", "ExperimentConfig", "SWEEP_AXES", "load_config", "expand_sweep"]

SWEEP_AXES = ("target_D", "c_b", "preset", "seed", "K")

_NUM = {"type": "number"}
_NONNEG = {"type": "number", "minimum": 0}

SCHEMA: dict = {
    "type": "object",
    "required": ["schema", "topology"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": 1},
        "topology": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["ring", "complete", "star", "pendant_ring", "explicit"]},
                "m": {"type": "integer", "minimum": 2},
                "edges": {"type": "array", "items": {
                    "type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2}},
                "dynamic_n": {"type": ["integer", "null"], "minimum": 1},
                "shifts": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
                "target_D": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["quadratic", "logistic", "mlp"]},
                "d": {"type": "integer", "minimum": 1},
                "n_samples": {"type": "integer", "minimum": 2},
                "partition": {"oneOf": [
                    {"const": "iid"},
                    {"type": "object", "required": ["label_skew"], "additionalProperties": False,
                     "properties": {"label_skew": {"type": "number", "minimum": 0, "maximum": 1}}},
                ]},
                "batch_size": {"type": "integer", "minimum": 1},
                "seed": {"type": ["integer", "null"]},
                "hidden": {"type": "integer", "minimum": 1},
                "reg": _NONNEG,
                "mu": {"type": "number", "exclusiveMinimum": 0},
                "L": {"type": "number", "exclusiveMinimum": 0},
                "spread": _NONNEG,
                "noise": _NONNEG,
                "n_test": {"type": "integer", "minimum": 1},
            },
        },
        "preset": {"enum": ["dpsgd", "matcha", "aldsgd", "custom", "theorem2"]},
        "hyper": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gamma": {"type": "number", "exclusiveMinimum": 0},
                "lr_schedule": {"type": "array", "items": {
                    "type": "array", "prefixItems": [{"type": "integer", "minimum": 1}, _NONNEG],
                    "minItems": 2, "maxItems": 2}},
                "lambda_best": _NONNEG,
                "lambda_deg": _NONNEG,
                "omega_best": _NONNEG,
                "omega_deg": _NONNEG,
                "alpha": {"type": ["number", "null"], "minimum": 0},
                "c_b": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "neighbor_models": {"enum": ["pre", "post"]},
            },
        },
        "K": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "stride": {"type": "integer", "minimum": 1},
        "out": {"type": ["string", "null"]},
        "random_start": {"type": "boolean"},
        "init": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["distinct_gaussian", "identical"]},
                "scale": _NONNEG,
                "value": _NUM,
            },
        },
        "spectral": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"type": "integer", "minimum": 100},
                "k_free": {"type": ["number", "null"]},
                "alpha": {"type": ["number", "null"]},
                "omega": {"type": ["number", "null"], "minimum": 0},
                "n_products": {"type": "integer", "minimum": 0},
                "trials": {"type": "integer", "minimum": 2},
                "leader_policy": {"enum": ["uniform", "self", "equal_loss"]},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "target_D": {"type": "array", "items": {"type": ["integer", "null"]}},
                "c_b": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
                "preset": {"type": "array", "items": {"enum": ["dpsgd", "matcha", "aldsgd", "custom", "theorem2"]}},
                "seed": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "K": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
    },
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


@dataclass(frozen=True)
class ExperimentConfig:
    topology: dict
    problem: dict = field(default_factory=lambda: ProblemSpec().to_dict())
    preset: str = "aldsgd"
    hyper: dict = field(default_factory=dict)
    K: int = 1000
    seed: int = 0
    stride: int = 10
    out: str | None = None
    random_start: bool = False
    init: dict = field(default_factory=lambda: {"mode": "distinct_gaussian", "scale": 1.0})
    spectral: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    schema: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        validate(data)
        data = copy.deepcopy(data)
        problem = ProblemSpec(**data.pop("problem", {})).to_dict()
        try:
            return cls(problem=problem, **data)
        except TypeError as exc:  # pragma: no cover - the schema catches unknown keys first
            raise ConfigError("", str(exc)) from exc

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_updates(self, **changes: Any) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})


def validate(data: Any) -> None:
    """Raise :class:`ConfigError` naming the offending field path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path)
        raise ConfigError(path, err.message)
    topo = data["topology"]
    if topo["kind"] == "explicit" and "edges" not in topo:
        raise ConfigError("topology/edges", "explicit topology needs an edge list")
    if topo["kind"] != "explicit" and "m" not in topo:
        raise ConfigError("topology/m", "node count is required")
    hyper = data.get("hyper", {})
    if hyper.get("omega_best", 0) + hyper.get("omega_deg", 0) >= 1:
        raise ConfigError("hyper", "omega_best + omega_deg must be < 1")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def expand_sweep(cfg: ExperimentConfig) -> list[tuple[dict, ExperimentConfig]]:
    """Cartesian product of the sweep axes, one ``(cell params, config)`` pair per cell."""
    axes = [(name, cfg.sweep[name]) for name in SWEEP_AXES if name in cfg.sweep]
    if not axes or any(len(values) == 0 for _, values in axes):
        return []
    cells = []
    for combo in itertools.product(*(values for _, values in axes)):
        params = dict(zip((name for name, _ in axes), combo))
        data = cfg.to_dict()
        data["sweep"] = {}
        for name, value in params.items():
            if name == "target_D":
                data["topology"]["target_D"] = value
            elif name == "c_b":
                data["hyper"]["c_b"] = value
            else:
                data[name] = value
        cells.append((params, ExperimentConfig.from_dict(data)))
    return cells
