from typing import Any, Dict

ARRAY_BLOB_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["name", "shape"],
    "properties": {
        "name": {"type": "string", "enum": ["weights", "bias", "mu_prime", "sigma_prime"]},
        "shape": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1, "maxItems": 2},
    },
    "additionalProperties": False,
}

MODEL_METADATA_SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$id": "covprop/model-metadata",
    "type": "object",
    "required": ["input_shape", "class_count", "layers"],
    "properties": {
        "input_shape": {
            "type": "array",
            "items": {"type": "integer", "minimum": 1},
            "minItems": 3,
            "maxItems": 3,
        },
        "class_count": {"type": "integer", "minimum": 1},
        "layers": {"type": "array", "items": {"$ref": "#/$defs/layer"}, "minItems": 1},
    },
    "additionalProperties": False,
    "$defs": {
        "arrays": {"type": "array", "items": ARRAY_BLOB_SCHEMA},
        "layer": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["conv", "linear", "avgpool", "relu", "flatten", "normalize", "residual"]},
                "in_channels": {"type": "integer", "minimum": 1},
                "out_channels": {"type": "integer", "minimum": 1},
                "kernel": {"type": "integer", "minimum": 1},
                "stride": {"type": ["integer", "null"], "minimum": 1},
                "padding": {"type": "integer", "minimum": 0},
                "in_dim": {"type": "integer", "minimum": 1},
                "out_dim": {"type": "integer", "minimum": 1},
                "enabled": {"type": "boolean"},
                "mode": {"enum": ["fixed", "batch"]},
                "arrays": {"$ref": "#/$defs/arrays"},
                "branch": {"type": "array", "items": {"$ref": "#/$defs/layer"}, "minItems": 1},
            },
            "additionalProperties": False,
        },
    },
}
