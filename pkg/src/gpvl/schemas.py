"""JSON schemas for the report files written by the command line."""
from __future__ import annotations

from .evaluation import METRIC_FIELDS
from .scene import COMMANDS

_NUM = {"type": ["number", "null"]}

METRICS_BLOCK = {
    "type": "object",
    "properties": {**{k: _NUM for k in METRIC_FIELDS}, "n_scenes": {"type": "integer", "minimum": 0}},
    "required": list(METRIC_FIELDS),
}

METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "evaluation metrics",
    "type": "object",
    "properties": {
        **METRICS_BLOCK["properties"],
        "by_command": {
            "type": "object",
            "properties": {c.value: METRICS_BLOCK for c in COMMANDS},
            "required": [c.value for c in COMMANDS],
            "additionalProperties": False,
        },
        "ego_status_masked": {"type": "boolean"},
        "collision_convention": {"enum": ["cumulative", "per_timestamp"]},
        "corruption": {
            "oneOf": [
                {"type": "null"},
                {"type": "object",
                 "properties": {"kind": {"type": "string"}, "severity": {"type": "number", "minimum": 0, "maximum": 1},
                                "seed": {"type": "integer"}, "level": {"const": "feature"}},
                 "required": ["kind", "severity", "seed", "level"]},
            ]
        },
    },
    "required": [*METRIC_FIELDS, "by_command", "ego_status_masked", "collision_convention", "corruption"],
}

PLAN_RECORD_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "plan record",
    "type": "object",
    "properties": {
        "scene_id": {"type": "string"},
        "command_pred": {"type": ["string", "null"]},
        "waypoints": {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                                  "minItems": 2, "maxItems": 2}},
        "valid": {"type": "boolean"},
        "failure_kind": {"type": ["string", "null"]},
        "decode_latency_ms": {"type": ["number", "null"]},
    },
    "required": ["scene_id", "command_pred", "waypoints", "valid", "failure_kind", "decode_latency_ms"],
    "additionalProperties": False,
}
