"""Experiment configuration: JSON documents validated against a closed schema."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .process import RegimeSpec, regime_from_config
from .switching import SwitchingModel, distribution_from_config


class ConfigParseError(ValueError):
    """The file is not valid JSON or an override is malformed."""


class ConfigValidationError(ValueError):
    """The document does not satisfy the schema or describes an invalid model."""


COMMANDS = ("simulate", "moments", "density", "martingale-check", "measure-check", "price", "hv")

_number = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_pair = {"type": "array", "items": _number, "minItems": 2, "maxItems": 2}
_pos_pair = {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}

_profile = {
    "oneOf": [
        _number,
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["constant", "hyperbolic", "linear", "table"]},
                "value": _number,
                "a": _number,
                "b": _number,
                "slope": _number,
                "intercept": _number,
                "x": {"type": "array", "items": _number},
                "values": {"type": "array", "items": _number},
            },
        },
    ]
}

_table2d = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "T_grid", "t_grid", "values"],
    "properties": {
        "kind": {"const": "table2d"},
        "T_grid": {"type": "array", "items": _number},
        "t_grid": {"type": "array", "items": _number},
        "values": {"type": "array", "items": {"type": "array", "items": _number}},
    },
}

_regime_block = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "c", "h"],
            "properties": {"kind": {"const": "constant"}, "c": _number, "h": _number},
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["velocity", "jump"],
            "properties": {"velocity": {"oneOf": [_profile, _table2d]}, "jump": _profile},
        },
    ]
}

_dist = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["exponential", "gamma", "weibull", "table"]},
        "rate": _pos,
        "shape": _pos,
        "scale": _pos,
        "t": {"type": "array", "items": _number},
        "survival": {"type": "array", "items": _number},
    },
}

_grid = {
    "oneOf": [
        {"type": "array", "items": _number, "minItems": 1},
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["start", "stop", "num"],
            "properties": {
                "start": _number,
                "stop": _number,
                "num": {"type": "integer", "minimum": 1},
                "spacing": {"enum": ["linear", "log"]},
            },
        },
    ]
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "model", "task"],
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "description": {"type": "string"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dists", "regime"],
            "properties": {
                "dists": {"type": "array", "items": _dist, "minItems": 2, "maxItems": 2},
                "regime": {"type": "array", "items": _regime_block, "minItems": 2, "maxItems": 2},
                "initial_state": {"enum": [0, 1]},
                "prev_sojourn": {"oneOf": [{"type": "null"}, {"type": "number", "minimum": 0}]},
                "spot": _pos,
                "rates": _pair,
            },
        },
        "task": {
            "type": "object",
            "additionalProperties": False,
            "required": ["command", "seed"],
            "properties": {
                "command": {"enum": list(COMMANDS)},
                "seed": {"type": "integer", "minimum": 0},
                "method": {"enum": ["grid", "closed_form_exp"]},
                "mode": {"enum": ["exact", "literal"]},
                "t_grid": _grid,
                "t_max": _pos,
                "dt": _pos,
                "t": _pos,
                "s": {"type": "number", "minimum": 0},
                "horizon": _pos,
                "n_paths": {"type": "integer", "minimum": 1},
                "mc_times": {"type": "array", "items": _pos},
                "n_x": {"type": "integer", "minimum": 11},
                "replication": {"type": "integer", "minimum": 0},
                "tolerance": _pos,
                "large_t_rel_tol": _pos,
                "measure": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["mu", "lambda"],
                    "properties": {"mu": _pos_pair, "lambda": _pos_pair},
                },
                "option": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["payoff", "maturity"],
                    "properties": {
                        "payoff": {"enum": ["call", "put", "digital", "forward", "unit"]},
                        "strike": _pos,
                        "maturity": _pos,
                    },
                },
                "methods": {"type": "array", "items": {"enum": ["pde", "fundamental", "mc"]}, "minItems": 1},
                "spots": {"type": "array", "items": _pos},
                "s_grid": {"type": "array", "items": _pos},
                "log_width": _pos,
                "n_y": {"type": "integer", "minimum": 11},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "prefix": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"}},
        },
    },
}


def bundled_dir():
    return resources.files("jumptelegraph") / "configs"


def bundled_names() -> list[str]:
    return sorted(p.name for p in bundled_dir().iterdir() if p.name.endswith(".cfg"))


def resolve_path(path: str) -> Path | object:
    p = Path(path)
    if p.exists():
        return p
    candidate = bundled_dir() / p.name
    if candidate.is_file():
        return candidate
    candidate = bundled_dir() / (p.name + ".cfg")
    if candidate.is_file():
        return candidate
    raise FileNotFoundError(path)


def load_document(path: str) -> dict:
    try:
        text = resolve_path(path).read_text()
    except FileNotFoundError as exc:
        raise ConfigParseError(f"config not found: {path}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: {exc}") from exc


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value``; the value is parsed as JSON when possible.

    Integer segments index into lists.
    """
    if "=" not in assignment:
        raise ConfigParseError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = [k for k in key.strip().split(".") if k]
    if not parts:
        raise ConfigParseError(f"override {assignment!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = copy.deepcopy(doc)
    node = out
    for p in parts[:-1]:
        if isinstance(node, list):
            node = node[_list_index(node, p, key)]
        elif isinstance(node, dict):
            node = node.setdefault(p, {})
        else:
            raise ConfigParseError(f"cannot descend into {p!r}")
    if isinstance(node, list):
        node[_list_index(node, parts[-1], key)] = value
    elif isinstance(node, dict):
        node[parts[-1]] = value
    else:
        raise ConfigParseError(f"cannot set {key!r}")
    return out


def _list_index(node: list, part: str, key: str) -> int:
    """List elements are addressed by integer path segments, e.g. ``model.dists.0.rate``."""
    try:
        k = int(part)
    except ValueError:
        raise ConfigParseError(f"{key!r}: {part!r} is not a list index") from None
    if not -len(node) <= k < len(node):
        raise ConfigParseError(f"{key!r}: index {k} out of range")
    return k


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigValidationError(f"{where}: {exc.message}") from exc


def make_grid(spec) -> np.ndarray:
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    if spec.get("spacing", "linear") == "log":
        if spec["start"] <= 0:
            raise ConfigValidationError("log-spaced grid needs a positive start")
        return np.geomspace(spec["start"], spec["stop"], spec["num"])
    return np.linspace(spec["start"], spec["stop"], spec["num"])


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    name: str
    description: str
    model: dict
    task: dict
    output: dict
    document: dict

    @classmethod
    def from_document(cls, doc: dict) -> "ExperimentConfig":
        validate(doc)
        return cls(doc["name"], doc.get("description", ""), doc["model"], doc["task"], doc.get("output", {}), doc)

    @property
    def command(self) -> str:
        return self.task["command"]

    @property
    def seed(self) -> int:
        return int(self.task["seed"])

    @property
    def prefix(self) -> str:
        return self.output.get("prefix", self.name)

    def dists(self):
        try:
            return tuple(distribution_from_config(d) for d in self.model["dists"])
        except (KeyError, ValueError) as exc:
            raise ConfigValidationError(f"model/dists: {exc}") from exc

    def regime(self) -> RegimeSpec:
        try:
            return regime_from_config(self.model["regime"])
        except (KeyError, ValueError) as exc:
            raise ConfigValidationError(f"model/regime: {exc}") from exc

    def switching_model(self, initial_state: int | None = None) -> SwitchingModel:
        d0, d1 = self.dists()
        state = self.model.get("initial_state", 0) if initial_state is None else initial_state
        return SwitchingModel(d0, d1, state, self.model.get("prev_sojourn"))

    def rate_regime(self) -> RegimeSpec | None:
        rates = self.model.get("rates")
        if rates is None or all(r == 0 for r in rates):
            return None
        return RegimeSpec.constant(rates, (0.0, 0.0))


def load_config(path: str, overrides=(), seed: int | None = None, command: str | None = None) -> ExperimentConfig:
    doc = load_document(path)
    for o in overrides:
        doc = apply_override(doc, o)
    if seed is not None:
        doc = apply_override(doc, f"task.seed={int(seed)}")
    if command is not None:
        doc = apply_override(doc, f"task.command={json.dumps(command)}")
    return ExperimentConfig.from_document(doc)
