"""Scenario configuration documents (JSON).

A document has the sections ``noise``, ``model``, ``ambiguity``, ``run`` and
``oracle``.  Parsing checks structure against a JSON schema and then checks
cross-field consistency; every problem found is reported together in one
:class:`~robust_smp.errors.ValidationError`.  The parsed configuration keeps
plain JSON data with defaults filled in, so it serializes back to an
equivalent document.
"""

from __future__ import annotations

import copy
import importlib
import json
from dataclasses import asdict, dataclass

import jsonschema
import numpy as np

from .errors import ParseError, RobustSMPError, ValidationError
from .investment import InvestmentSpec, build_investment_model
from .model import Box, LqFamilySpec, ScenarioModel, build_lq_model
from .path_space import NoiseSpec, fair_coin
from .robust import AmbiguitySet

_NUM_ARRAY = {"type": ["array", "number"]}
_LQ_KEYS = ("A", "B", "a", "C", "D", "c", "Q", "R", "q", "r", "S", "s")

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["noise", "model"],
    "properties": {
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "required": ["horizon"],
            "properties": {
                "horizon": {"type": "integer", "minimum": 1},
                "dim": {"type": "integer", "minimum": 1},
                "standardized": {"type": "boolean"},
                "fair_coin": {"type": "boolean"},
                "steps": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["atoms"],
                        "properties": {"atoms": {
                            "type": "array", "minItems": 1,
                            "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                      "prefixItems": [_NUM_ARRAY, {"type": "number"}]},
                        }},
                    },
                },
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "minProperties": 1,
            "maxProperties": 1,
            "properties": {
                "lq": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["state_dim", "control_dim", "scenarios"],
                    "properties": {
                        "state_dim": {"type": "integer", "minimum": 1},
                        "control_dim": {"type": "integer", "minimum": 1},
                        "x0": _NUM_ARRAY,
                        "labels": {"type": "array"},
                        "control_box": {
                            "type": "object", "additionalProperties": False, "required": ["lo", "hi"],
                            "properties": {"lo": _NUM_ARRAY, "hi": _NUM_ARRAY},
                        },
                        "scenarios": {
                            "type": "array", "minItems": 1,
                            "items": {"type": "object", "additionalProperties": False,
                                      "properties": {key: _NUM_ARRAY for key in _LQ_KEYS}},
                        },
                    },
                },
                "investment": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["horizon", "stocks", "rate", "mu1", "mu2", "beta1", "beta2",
                                 "G1", "G2", "H1", "H2", "psi", "x0"],
                    "properties": {
                        "horizon": {"type": "integer", "minimum": 1},
                        "stocks": {"type": "integer", "minimum": 1},
                        "rate": _NUM_ARRAY,
                        **{key: {"type": "array"} for key in ("mu1", "mu2", "beta1", "beta2", "G1", "G2", "psi")},
                        "H1": {"type": "number"},
                        "H2": {"type": "number"},
                        "x0": {"type": "number"},
                    },
                },
                "generic": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["factory"],
                    "properties": {
                        "factory": {"type": "string", "pattern": r"^[\w.]+:\w+$"},
                        "params": {"type": "object"},
                    },
                },
            },
        },
        "ambiguity": {
            "type": "object",
            "additionalProperties": False,
            "required": ["vertices"],
            "properties": {"vertices": {"type": "array", "minItems": 1,
                                        "items": {"type": "array", "items": {"type": "number"}}}},
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "control": {},
                "direction": {},
                "deltas": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "duality_tol": {"type": "number", "exclusiveMinimum": 0},
                "active_tol": {"type": "number", "exclusiveMinimum": 0},
                "theta_tol": {"type": "number", "exclusiveMinimum": 0},
                "value_tol": {"type": "number", "exclusiveMinimum": 0},
                "lambda_grid_density": {"type": "integer", "minimum": 2},
                "radius": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "max_leaves": {"type": "integer", "minimum": 1},
                "assume_convex": {"type": "boolean"},
            },
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid": {
                    "type": "object", "additionalProperties": False,
                    "properties": {
                        "points": {"type": "integer", "minimum": 1},
                        "lo": _NUM_ARRAY,
                        "hi": _NUM_ARRAY,
                        "relative": {"type": "boolean"},
                    },
                },
                "slack": {"type": "number", "minimum": 0},
                "cap": {"type": "integer", "minimum": 1},
            },
        },
    },
}

RUN_DEFAULTS = {
    "control": "zero",
    "direction": "random",
    "deltas": [0.1, 0.05, 0.025, 0.0125],
    "tol": 1e-8,
    "duality_tol": 1e-10,
    "active_tol": 1e-9,
    "theta_tol": 1e-8,
    "value_tol": 1e-6,
    "lambda_grid_density": 101,
    "radius": 1.0,
    "seed": 0,
    "max_leaves": 10**6,
    "assume_convex": False,
}
ORACLE_DEFAULTS = {"grid": {"points": 41, "lo": -1.0, "hi": 1.0, "relative": True}, "slack": 1e-6, "cap": 10**7}


@dataclass
class ScenarioConfig:
    """Validated configuration document with defaults filled in."""

    noise: dict
    model: dict
    ambiguity: dict
    run: dict
    oracle: dict

    @property
    def family(self):
        return next(iter(self.model))

    def to_dict(self):
        return copy.deepcopy(asdict(self))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def noise_spec(self) -> NoiseSpec:
        return _noise_spec(self.noise)

    def build_model(self) -> ScenarioModel:
        return _build_model(self.model, self.noise)

    def investment_spec(self) -> InvestmentSpec:
        return _investment_spec(self.model["investment"], self.noise)

    def ambiguity_set(self) -> AmbiguitySet:
        return AmbiguitySet(self.ambiguity["vertices"])


def _noise_spec(noise):
    N = noise["horizon"]
    if noise.get("fair_coin"):
        return fair_coin(N, noise.get("dim", 1))
    steps = noise["steps"]
    if len(steps) == 1:
        steps = steps * N
    parsed = []
    for step in steps:
        values = [np.atleast_1d(np.asarray(v, dtype=float)) for v, _ in step["atoms"]]
        parsed.append((np.array(values), np.array([p for _, p in step["atoms"]], dtype=float)))
    return NoiseSpec(N, noise.get("dim", 1), tuple(parsed), noise.get("standardized", False))


def _stagewise(value, N, base_shape, name):
    """Broadcast a stage-constant entry to ``(N, *base_shape)``; per-stage entries pass through."""
    arr = np.asarray(value, dtype=float)
    if arr.shape == tuple(base_shape):
        return np.broadcast_to(arr, (N,) + tuple(base_shape)).copy()
    if arr.shape == (N,) + tuple(base_shape):
        return arr
    raise ValueError(f"{name} has shape {arr.shape}; expected {tuple(base_shape)} or {(N,) + tuple(base_shape)}")


def _lq_spec(lq, noise):
    N, d = noise["horizon"], noise.get("dim", 1)
    n, m = lq["state_dim"], lq["control_dim"]
    stage_shapes = {"A": (n, n), "B": (n, m), "a": (n,), "C": (d, n, n), "D": (d, n, m), "c": (d, n),
                    "Q": (n, n), "R": (m, m), "q": (n,), "r": (m,)}
    terminal_shapes = {"S": (n, n), "s": (n,)}
    fields = {k: [] for k in _LQ_KEYS}
    for g, sc in enumerate(lq["scenarios"]):
        for key, shape in stage_shapes.items():
            fields[key].append(_stagewise(sc[key], N, shape, f"scenarios[{g}].{key}")
                               if key in sc else np.zeros((N,) + shape))
        for key, shape in terminal_shapes.items():
            arr = np.asarray(sc.get(key, np.zeros(shape)), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"scenarios[{g}].{key} has shape {arr.shape}, expected {shape}")
            fields[key].append(arr)
    return LqFamilySpec(**{k: np.array(v) for k, v in fields.items()})


def _investment_spec(inv, noise):
    return InvestmentSpec(
        horizon=inv["horizon"], stocks=inv["stocks"], noise_dim=noise.get("dim", 1),
        rate=inv["rate"], mu=(inv["mu1"], inv["mu2"]), beta=(inv["beta1"], inv["beta2"]),
        G=(inv["G1"], inv["G2"]), H=(inv["H1"], inv["H2"]), psi=inv["psi"], x0=inv["x0"])


def _build_model(model, noise):
    if "lq" in model:
        lq = model["lq"]
        spec = _lq_spec(lq, noise)
        boxes = None
        if "control_box" in lq:
            m = lq["control_dim"]
            box = Box(np.broadcast_to(np.asarray(lq["control_box"]["lo"], float), (m,)),
                      np.broadcast_to(np.asarray(lq["control_box"]["hi"], float), (m,)))
            boxes = [box] * noise["horizon"]
        x0 = lq.get("x0", np.zeros(lq["state_dim"]))
        x0 = np.broadcast_to(np.asarray(x0, dtype=float), (lq["state_dim"],))
        return build_lq_model(spec, x0, boxes, lq.get("labels"))
    if "investment" in model:
        return build_investment_model(_investment_spec(model["investment"], noise))
    generic = model["generic"]
    module, func = generic["factory"].split(":")
    built = getattr(importlib.import_module(module), func)(**generic.get("params", {}))
    if not isinstance(built, ScenarioModel):
        raise ValueError(f"factory {generic['factory']} did not return a ScenarioModel")
    return built


def _semantic_errors(doc):
    """Cross-field checks; returns a list of messages."""
    errors = []
    noise = doc["noise"]
    N = noise["horizon"]
    if not noise.get("fair_coin") and "steps" not in noise:
        errors.append("noise: give either steps or fair_coin")
    if "steps" in noise and noise.get("fair_coin"):
        errors.append("noise: steps and fair_coin are mutually exclusive")
    if "steps" in noise and len(noise["steps"]) not in (1, N):
        errors.append(f"noise.steps: need 1 or {N} entries, got {len(noise['steps'])}")
    if not errors:
        try:
            _noise_spec(noise)
        except (RobustSMPError, ValueError) as exc:
            errors.append(f"noise: {exc}")

    model = None
    family = next(iter(doc["model"]))
    if family == "investment":
        inv = doc["model"]["investment"]
        if inv["horizon"] != N:
            errors.append(f"model.investment.horizon is {inv['horizon']} but noise.horizon is {N}")
    if family == "lq" and "labels" in doc["model"]["lq"]:
        if len(doc["model"]["lq"]["labels"]) != len(doc["model"]["lq"]["scenarios"]):
            errors.append("model.lq.labels: need one label per scenario")
    if not errors:
        try:
            model = _build_model(doc["model"], noise)
        except (RobustSMPError, ValueError, ImportError, AttributeError, TypeError) as exc:
            errors.append(f"model.{family}: {exc}")
    if model is not None and (model.horizon != N or model.noise_dim != noise.get("dim", 1)):
        errors.append("model and noise disagree on horizon or noise dimension")

    vertices = doc["ambiguity"]["vertices"]
    for i, v in enumerate(vertices):
        if model is not None and len(v) != model.n_scenarios:
            errors.append(f"ambiguity.vertices[{i}]: has {len(v)} weights for {model.n_scenarios} scenarios")
        if any(w < -1e-15 for w in v):
            errors.append(f"ambiguity.vertices[{i}]: negative weight")
        if v and abs(sum(v) - 1.0) > 1e-12:
            errors.append(f"ambiguity.vertices[{i}]: vertex sums to {sum(v):.12g}")
    deltas = doc["run"]["deltas"]
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        errors.append("run.deltas: must be strictly decreasing")
    if model is not None:
        for key in ("control", "direction"):
            try:
                _check_control_spec(doc["run"][key], model, key, family)
            except ValueError as exc:
                errors.append(f"run.{key}: {exc}")
    return errors


def _check_control_spec(spec, model, key, family):
    if key == "control":
        named = ("zero", "stationary", "theta_star") if family == "investment" else ("zero", "stationary")
    else:
        named = ("random", "zero")
    if isinstance(spec, str):
        if spec not in named:
            raise ValueError(f"unknown control name {spec!r}; use one of {named}")
        return
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ValueError("give a name or exactly one of constant, stages, nodes, stationary")
    kind, value = next(iter(spec.items()))
    m, N = model.control_dim, model.horizon
    if kind == "constant":
        if np.shape(value) != (m,):
            raise ValueError(f"constant control needs {m} entries")
    elif kind == "stages":
        if np.shape(value) != (N, m):
            raise ValueError(f"stage controls need shape ({N}, {m})")
    elif kind == "nodes":
        if len(value) != N:
            raise ValueError(f"node controls need {N} stages")
    elif kind == "stationary" and key == "control":
        if len(value) != model.n_scenarios:
            raise ValueError(f"stationary weights need {model.n_scenarios} entries")
    else:
        raise ValueError(f"unknown control kind {kind!r}")


def _with_defaults(doc):
    doc = copy.deepcopy(doc)
    doc["noise"].setdefault("dim", 1)
    doc["noise"].setdefault("standardized", False)
    run = dict(RUN_DEFAULTS)
    if "investment" in doc["model"]:
        run["control"] = "theta_star"
    run.update(doc.get("run", {}))
    doc["run"] = run
    oracle = copy.deepcopy(ORACLE_DEFAULTS)
    user = doc.get("oracle", {})
    oracle["grid"].update(user.get("grid", {}))
    oracle.update({k: v for k, v in user.items() if k != "grid"})
    doc["oracle"] = oracle
    if "ambiguity" not in doc:
        family = next(iter(doc["model"]))
        if family == "lq":
            M = len(doc["model"]["lq"]["scenarios"])
        elif family == "investment":
            M = 2
        else:
            M = None
        if M is not None:
            doc["ambiguity"] = {"vertices": np.eye(M).tolist()}
    return doc


def validate_document(doc) -> ScenarioConfig:
    """Schema and consistency checks on a decoded document."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = [f"{'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
              for e in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))]
    if errors:
        raise ValidationError(errors)
    doc = _with_defaults(doc)
    if "ambiguity" not in doc:
        raise ValidationError(["ambiguity: required for generic models"])
    errors = _semantic_errors(doc)
    if errors:
        raise ValidationError(errors)
    return ScenarioConfig(doc["noise"], doc["model"], doc["ambiguity"], doc["run"], doc["oracle"])


def parse_scenario_text(text: str) -> ScenarioConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed document at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                         exc.lineno, exc.colno) from exc
    return validate_document(doc)


def parse_scenario_file(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario_text(fh.read())
