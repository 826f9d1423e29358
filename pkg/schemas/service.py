from typing import Any, Dict

IMAGE_PAYLOAD_SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$id": "covprop/image-payload",
    "type": "object",
    "required": ["image"],
    "properties": {
        "image": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "array",
                "minItems": 1,
                "items": {"type": "array", "minItems": 1, "items": {"type": "number"}},
            },
        },
    },
    "additionalProperties": False,
}

CERT_RESULT_SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$id": "covprop/cert-result",
    "type": "object",
    "required": ["predicted", "runner_up", "p_lower", "radius", "margin_z"],
    "properties": {
        "predicted": {"type": "integer", "minimum": 0},
        "runner_up": {"type": "integer", "minimum": 0},
        "p_lower": {"type": "number", "minimum": 0, "maximum": 1},
        "radius": {"type": "number", "minimum": 0},
        "margin_z": {"type": "number"},
    },
    "additionalProperties": False,
}

COST_ROWS_SCHEMA: Dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$id": "covprop/cost-rows",
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "required": ["layers_back", "sigma_count", "cross_count"],
        "properties": {
            "layers_back": {"type": "integer", "minimum": 0},
            "sigma_count": {"type": "integer", "minimum": 1},
            "cross_count": {"type": "integer", "minimum": 0},
        },
        "additionalProperties": False,
    },
}
