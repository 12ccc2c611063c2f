"""
RunConfig: the single JSON document that drives every batch command.

The document is validated against SCHEMA (unknown keys rejected at every
level) before anything is computed; defaults are filled in afterwards.
"""

import copy
import json

import jsonschema

from cell import constants, override_coefficients
from domain import (
    boundary_trace_max,
    box_mask,
    build_mesh,
    build_problem,
    build_time_axis,
    sample_function,
)
from field_export import load_field_binary
from helpers import PRESET_KINDS, make_preset


class ConfigError(ValueError):
    pass


_NUMBER_LIST = {"type": "array", "items": {"type": "number"}}

_FIELD_SPEC = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": list(PRESET_KINDS) + ["file"]},
        "value": {"type": "number"},
        "amplitude": {"type": "number"},
        "modes": {"type": "integer", "minimum": 1},
        "center": _NUMBER_LIST,
        "width": {"type": "number", "exclusiveMinimum": 0},
        "time_poly": _NUMBER_LIST,
        "path": {"type": "string"},
    },
}

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["mesh", "time"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "mesh": {
            "type": "object",
            "additionalProperties": False,
            "required": ["d", "nodes"],
            "properties": {
                "d": {"type": "integer", "minimum": 1, "maximum": 3},
                "nodes": {
                    "oneOf": [
                        {"type": "integer", "minimum": 3},
                        {"type": "array", "items": {"type": "integer", "minimum": 3}, "minItems": 1, "maxItems": 3},
                    ]
                },
                "box": {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
            },
        },
        "time": {
            "type": "object",
            "additionalProperties": False,
            "required": ["T", "M"],
            "properties": {
                "T": {"type": "number", "exclusiveMinimum": 0},
                "M": {"type": "integer", "minimum": 1},
            },
        },
        "physics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 3},
                "C0": {"type": "number", "exclusiveMinimum": 0},
                "A": {"type": "number", "minimum": 0},
                "B": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "f": _FIELD_SPEC,
                "u_T": _FIELD_SPEC,
                "omega": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["lower", "upper"],
                    "properties": {"lower": _NUMBER_LIST, "upper": _NUMBER_LIST},
                },
                "N": {"type": "number", "exclusiveMinimum": 0},
                "control": _FIELD_SPEC,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "linear_tol": {"type": "number", "exclusiveMinimum": 0},
                "linear_method": {"enum": ["cg", "direct"]},
                "relax": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "step_rule": {"enum": ["bb", "fixed"]},
                "workers": {"type": "integer", "minimum": 1},
                "log_every": {"type": "integer", "minimum": 1},
                "cross_check": {"type": "boolean"},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["csv", "bin"]}},
                "csv_slices": {"type": "array", "items": {"type": "integer"}},
            },
        },
        "acceptance": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "optimality_residual": {"type": "number", "exclusiveMinimum": 0},
                "agreement": {"type": "number", "exclusiveMinimum": 0},
                "identity_order_min": {"type": "number"},
                "trend_tol": {"type": "number", "minimum": 0},
            },
        },
        "mms": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "levels": {"type": "array", "items": {"type": "integer", "minimum": 3}, "minItems": 2},
                "M0": {"type": "integer", "minimum": 1},
                "time_nodes": {"type": "integer", "minimum": 3},
                "time_steps": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3},
                "space_order_min": {"type": "number"},
                "time_order_min": {"type": "number"},
            },
        },
        "gradcheck": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambdas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "max_relative_error": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "kappa_sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"kappas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1}},
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "physics": {},
    "problem": {
        "f": {"kind": "zero"},
        "u_T": {"kind": "zero"},
        "N": 1.0,
        "control": {"kind": "zero"},
    },
    "solver": {
        "linear_tol": 1e-10,
        "linear_method": "cg",
        "relax": 0.5,
        "tol": 1e-10,
        "max_iter": 5000,
        "step_rule": "bb",
        "workers": 1,
        "log_every": 100,
        "cross_check": False,
    },
    "output": {"directory": "out", "formats": ["csv", "bin"], "csv_slices": [0, -1]},
    "acceptance": {"optimality_residual": 1e-8, "agreement": 1e-6, "identity_order_min": 0.9, "trend_tol": 1e-8},
    "mms": {"levels": [17, 33, 65], "M0": 8, "time_nodes": 33, "time_steps": [8, 16, 32, 64], "space_order_min": 1.9, "time_order_min": 0.9},
    "gradcheck": {"lambdas": [1e-2, 1e-3, 1e-4], "max_relative_error": 1e-3},
    "kappa_sweep": {"kappas": [1.0, 10.0, 100.0, 1000.0]},
}


def _merge(defaults, given):
    merged = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def validate_config(raw):
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as error:
        location = "/".join(str(part) for part in error.absolute_path) or "<root>"
        raise ConfigError(f"config error at {location}: {error.message}") from error
    physics = raw.get("physics", {})
    if ("A" in physics) != ("B" in physics):
        raise ConfigError("physics overrides need both A and B")
    if "A" in physics and ("n" in physics or "C0" in physics):
        raise ConfigError("give either (n, C0) or (A, B) in physics, not both")
    return _merge(DEFAULTS, raw)


def load_config(path, out_dir=None, seed=None):
    try:
        with open(path, "r") as config_file:
            raw = json.load(config_file)
    except (OSError, json.JSONDecodeError) as error:
        raise ConfigError(f"cannot read config {path}: {error}") from error
    config = validate_config(raw)
    if out_dir is not None:
        config["output"]["directory"] = out_dir
    if seed is not None:
        config["seed"] = int(seed)
    return config


def coefficients_from_config(config):
    physics = config["physics"]
    try:
        if "A" in physics:
            return override_coefficients(physics["A"], physics["B"])
        return constants(physics.get("n", 3), physics.get("C0", 1.0))
    except ValueError as error:
        raise ConfigError(str(error)) from error


def axes_from_config(config):
    mesh_block, time_block = config["mesh"], config["time"]
    try:
        mesh = build_mesh(mesh_block["d"], mesh_block["nodes"], mesh_block.get("box"))
        time = build_time_axis(time_block["T"], time_block["M"])
    except ValueError as error:
        raise ConfigError(str(error)) from error
    return mesh, time


def field_from_spec(spec, mesh, time):
    """Sample a preset, or read a binary field file; also returns the boundary trace."""
    if spec["kind"] == "file":
        if "path" not in spec:
            raise ConfigError("file field needs a 'path'")
        return load_field_binary(spec["path"], mesh, time), 0.0
    g = make_preset(spec)
    return sample_function(mesh, time, g), boundary_trace_max(mesh, time, g)


def problem_from_config(config):
    mesh, time = axes_from_config(config)
    coeffs = coefficients_from_config(config)
    block = config["problem"]
    try:
        f, _ = field_from_spec(block["f"], mesh, time)
        u_T, trace = field_from_spec(block["u_T"], mesh, time)
        omega_block = block.get("omega", {"lower": [0.25] * mesh.d, "upper": [0.75] * mesh.d})
        omega = box_mask(mesh, omega_block["lower"], omega_block["upper"])
        solver = config["solver"]
        return build_problem(
            mesh,
            time,
            f,
            u_T,
            omega,
            block["N"],
            coeffs,
            linear_tol=solver["linear_tol"],
            linear_method=solver["linear_method"],
            u_T_boundary_max=trace,
        )
    except (ValueError, OSError) as error:
        raise ConfigError(str(error)) from error


def control_from_config(config, problem):
    control, _ = field_from_spec(config["problem"]["control"], problem.mesh, problem.time)
    return control
