"""Experiment configuration: JSON schema, parsing and canonical serialisation."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

VALIDATION_KINDS = ["lemma1", "theorem2", "theorem3", "theorem4", "theorem5"]

_F = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["identity", "normalized_log", "clip"]},
        "b0": {"type": "number"},
        "b1": {"type": "number"},
        "clip_max": {"type": ["number", "null"], "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

_DIS = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["CQL", "TV", "KL"]},
        "out_of_support_penalty": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

_POLICY_CLASS = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["deterministic_enumeration", "epsilon_supported_softmax"]},
        "epsilon_beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "steps": {"type": "integer", "minimum": 0},
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "restarts": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
    },
    "additionalProperties": False,
}

_TRAIN = {
    "type": "object",
    "properties": {
        "alpha": {"type": "number", "minimum": 0},
        "f": _F,
        "weight_mode": {"enum": ["exact_ratio", "dualdice", "constant_one", "random_uniform"]},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "steps": {"type": "integer", "minimum": 1},
        "q_steps": {"type": "integer", "minimum": 1},
        "lr_q": {"type": "number", "exclusiveMinimum": 0},
        "improvement": {"enum": ["full", "mirror"]},
        "pi_steps": {"type": "integer", "minimum": 1},
        "lr_pi": {"type": "number", "exclusiveMinimum": 0},
        "dice_solver": {"enum": ["closed_form", "alternating_sgd"]},
        "pretrain_steps": {"type": "integer", "minimum": 0},
        "zeta_steps": {"type": "integer", "minimum": 0},
        "out_of_support_penalty": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["environment", "dataset"],
    "properties": {
        "environment": {
            "oneOf": [
                {"type": "object", "required": ["kind"], "additionalProperties": False, "properties": {
                    "kind": {"const": "chain"},
                    "num_left": {"type": "integer", "minimum": 1},
                    "num_right": {"type": "integer", "minimum": 1},
                    "reward_left": {"type": "number", "minimum": -1, "maximum": 1},
                    "reward_right": {"type": "number", "minimum": -1, "maximum": 1},
                    "discount": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}}},
                {"type": "object", "required": ["kind"], "additionalProperties": False, "properties": {
                    "kind": {"const": "garnet"},
                    "num_states": {"type": "integer", "minimum": 1},
                    "num_actions": {"type": "integer", "minimum": 1},
                    "branching": {"type": "integer", "minimum": 1},
                    "discount": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "seed": {"type": ["integer", "null"]}}},
                {"type": "object", "required": ["kind"], "additionalProperties": False, "properties": {
                    "kind": {"const": "gridworld"},
                    "size": {"type": "integer", "minimum": 2},
                    "slip": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "discount": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}}},
            ]
        },
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "behavior": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["uniform", "dirichlet", "epsilon_optimal", "chain_skewed"]},
                        "epsilon": {"type": "number", "minimum": 0, "maximum": 1},
                        "p_left": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                },
                "episodes": {"type": "integer", "minimum": 1},
                "horizon": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "algorithms": {
            "type": "array",
            "items": {"type": "object", "required": ["name"], "additionalProperties": False,
                      "properties": {"name": {"type": "string", "minLength": 1}, "train": _TRAIN}},
        },
        "validations": {
            "type": "array",
            "items": {"type": "object", "required": ["kind"], "additionalProperties": False,
                      "properties": {
                          "kind": {"enum": VALIDATION_KINDS},
                          "alpha": {"type": ["number", "null"], "minimum": 0},
                          "dis": _DIS,
                          "f": _F,
                          "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                          "cap": {"type": "number", "exclusiveMinimum": 0},
                          "policy_class": _POLICY_CLASS}},
        },
        "output_dir": {"type": "string"},
        "seeds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"start": {"type": "integer"}, "count": {"type": "integer", "minimum": 1},
                           "root": {"type": "integer"}},
        },
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "environment": {
        "chain": {"num_left": 2, "num_right": 2, "reward_left": 1.0, "reward_right": 0.5, "discount": 0.9},
        "garnet": {"num_states": 4, "num_actions": 2, "branching": 2, "discount": 0.9, "seed": None},
        "gridworld": {"size": 3, "slip": 0.1, "discount": 0.9},
    },
    "dataset": {"behavior": {"kind": "uniform", "epsilon": 0.3, "p_left": 0.1},
                "episodes": 200, "horizon": 5, "seed": 0},
    "validation": {"alpha": None, "dis": {"kind": "CQL", "out_of_support_penalty": 1e6},
                   "f": {"kind": "identity", "b0": 0.5, "b1": 5.0, "clip_max": None},
                   "delta": 0.1, "cap": 1.0,
                   "policy_class": {"kind": "deterministic_enumeration", "epsilon_beta": 0.05,
                                    "steps": 2000, "learning_rate": 0.05, "restarts": 8, "seed": 0}},
}


class ConfigError(ValueError):
    """A configuration document failed to parse or validate."""

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    environment: dict
    dataset: dict
    algorithms: list = field(default_factory=list)
    validations: list = field(default_factory=list)
    output_dir: str = "results"
    seeds: dict = field(default_factory=dict)

    def seed_list(self, default_count: int, override: int | None = None) -> list[int]:
        start = self.seeds.get("start", 0)
        count = override or self.seeds.get("count", default_count)
        return list(range(start, start + count))

    @property
    def root_seed(self) -> int:
        return self.seeds.get("root", 0)

    def to_dict(self) -> dict:
        """Canonical form: every default filled in."""
        return {
            "environment": copy.deepcopy(self.environment),
            "dataset": copy.deepcopy(self.dataset),
            "algorithms": copy.deepcopy(self.algorithms),
            "validations": copy.deepcopy(self.validations),
            "output_dir": self.output_dir,
            "seeds": copy.deepcopy(self.seeds),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def validate_document(doc) -> list[str]:
    """Schema diagnostics as ``field.path: message`` strings (empty when valid)."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        errors.append(f"{where}: {err.message}")
    if isinstance(doc, dict) and not errors:
        if not doc.get("algorithms") and not doc.get("validations"):
            errors.append("<root>: at least one algorithm or validation is required")
        names = [a["name"] for a in doc.get("algorithms", [])]
        if len(set(names)) != len(names):
            errors.append("algorithms: names must be distinct")
    return errors


def from_dict(doc) -> ExperimentConfig:
    errors = validate_document(doc)
    if errors:
        raise ConfigError(errors)
    env = doc["environment"]
    environment = _merge(DEFAULTS["environment"][env["kind"]], env)
    environment["kind"] = env["kind"]
    dataset = _merge(DEFAULTS["dataset"], doc["dataset"])
    validations = [_merge(DEFAULTS["validation"], v) for v in doc.get("validations", [])]
    algorithms = [{"name": a["name"], "train": copy.deepcopy(a.get("train", {}))}
                  for a in doc.get("algorithms", [])]
    return ExperimentConfig(environment=environment, dataset=dataset, algorithms=algorithms,
                            validations=validations, output_dir=doc.get("output_dir", "results"),
                            seeds=copy.deepcopy(doc.get("seeds", {})))


def parse(text: str) -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from exc
    return from_dict(doc)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from exc
    return parse(text)
