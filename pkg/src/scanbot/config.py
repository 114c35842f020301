"""JSON schemas and validation for robot models and scenario files."""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from . import sim
from .robot_core import RobotModel

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_VEC6 = {"type": "array", "items": {"type": "number"}, "minItems": 6, "maxItems": 6}
_VEC7 = {"type": "array", "items": {"type": "number"}, "minItems": 7, "maxItems": 7}
_MAT3 = {"type": "array", "minItems": 3, "maxItems": 3, "items": _VEC3}

ROBOT_SCHEMA = {
    "type": "object",
    "required": ["links", "joint_limits", "torque_limits", "f_max"],
    "properties": {
        "name": {"type": "string"},
        "links": {
            "type": "array",
            "minItems": 7,
            "items": {
                "type": "object",
                "required": ["alpha", "a", "d", "mass", "com", "inertia"],
                "properties": {
                    "alpha": {"type": "number"},
                    "a": {"type": "number"},
                    "d": {"type": "number"},
                    "theta0": {"type": "number"},
                    "axis": _VEC3,
                    "mass": {"type": "number", "exclusiveMinimum": 0},
                    "com": _VEC3,
                    "inertia": _MAT3,
                },
            },
        },
        "tool": {"type": "object", "properties": {"xyz": _VEC3}},
        "joint_limits": {"type": "array", "items": {
            "type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
        "torque_limits": {"type": "array", "items": {"type": "number"}},
        "f_max": _VEC6,
        "gravity": _VEC3,
    },
}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["initial_q", "patient"],
    "properties": {
        "duration_s": {"type": "number", "exclusiveMinimum": 0},
        "dt_s": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer"},
        "initial_q": _VEC7,
        "task": {"type": "object", "properties": {
            "T": {"type": "number", "exclusiveMinimum": 0},
            "N": {"type": "integer", "exclusiveMinimum": 1}}},
        "recovery": {"type": "object", "properties": {
            "T_rec": {"type": "number", "exclusiveMinimum": 0}}},
        "thresholds": {"type": "object", "properties": {
            "a_ht": {"type": "number"}, "a_ft": {"type": "number"},
            "a_pt": {"type": "number"}, "eps": {"type": "number"}}},
        "weighting": {"type": "object", "properties": {
            "r_h": {"type": "number"}, "r_p": {"type": "number"},
            "x_top": {"type": "number"}, "x_bottom": {"type": "number"},
            "f0": {"type": "number"}}},
        "gains": {"type": "object", "properties": {
            "M_d": _VEC6, "K_g": _VEC6,
            "K_gn": {"anyOf": [{"type": "number"}, _VEC7]},
            "q_nominal": _VEC7}},
        "contact": {"type": "object", "properties": {
            "k_env": {"type": "number", "minimum": 0},
            "d_env": {"type": "number", "minimum": 0}}},
        "patient": {
            "type": "object",
            "required": ["cylinder_radius_m", "base_position"],
            "properties": {
                "cylinder_radius_m": {"type": "number", "exclusiveMinimum": 0},
                "cylinder_length_m": {"type": "number", "exclusiveMinimum": 0},
                "base_position": _VEC3,
                "head_offset": _VEC3,
            },
        },
        "hand": {"type": "object"},
        "perception": {"type": "object"},
        "safety": {"type": "object", "properties": {"f_max": _VEC6}},
        "mode_logic": {"type": "object"},
        "events": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "t_start", "t_end"],
                "properties": {
                    "kind": {"enum": sorted(sim.EVENT_KINDS)},
                    "t_start": {"type": "number"},
                    "t_end": {"type": "number"},
                    "params": {"type": "object"},
                },
            },
        },
    },
}


def load_robot(path: str | Path) -> RobotModel:
    """Validate the robot JSON against the schema and build the model."""
    with open(path) as fh:
        doc = json.load(fh)
    jsonschema.validate(doc, ROBOT_SCHEMA)
    return RobotModel.from_dict(doc)


def load_scenario(path: str | Path, n_joints: int = 7) -> sim.ScenarioConfig:
    """Validate the scenario JSON against the schema and build the config.

    Construction re-checks the semantic invariants (thresholds in (0,1),
    x_top > x_bottom, positive radii and durations, diagonal PSD gains).
    """
    with open(path) as fh:
        doc = json.load(fh)
    jsonschema.validate(doc, SCENARIO_SCHEMA)
    cfg = sim.ScenarioConfig.from_dict(doc, n_joints)
    if cfg.T_rec <= 0.0:
        raise ValueError("recovery duration T_rec must be positive")
    if cfg.T <= 0.0 or cfg.N_pts < 2:
        raise ValueError("task requires T > 0 and N >= 2")
    return cfg


def parameter_table(cfg: sim.ScenarioConfig) -> list[tuple[str, str]]:
    """Human-readable control-parameter rows for `scanbot check`."""
    w, th = cfg.weighting, cfg.thresholds
    return [
        ("r_h", f"{w.r_h} m"), ("r_p", f"{w.r_p} m"),
        ("x_top", f"{w.x_top} m"), ("x_bottom", f"{w.x_bottom} m"),
        ("f0", f"{w.f0} N"),
        ("a_ht", f"{th.a_ht}"), ("a_ft", f"{th.a_ft}"), ("a_pt", f"{th.a_pt}"),
        ("eps", f"{th.eps} m"),
        ("T", f"{cfg.T} s"), ("T_rec", f"{cfg.T_rec} s"), ("N", f"{cfg.N_pts}"),
        ("dt", f"{cfg.dt} s"), ("seed", f"{cfg.seed}"),
    ]
