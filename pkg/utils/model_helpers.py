"""Schema-checked parsing of JSON payloads into pydantic models."""

import json
from typing import Any, Dict, List, Optional, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

from covprop.errors import ValidationFailure
from utils.schema_validation import validate_schema

T = TypeVar("T", bound=BaseModel)


def _extract(data: Any, data_path: str, context: str) -> Any:
    for part in data_path.split("."):
        if isinstance(data, dict) and part in data:
            data = data[part]
        elif isinstance(data, list) and part.isdigit() and int(part) < len(data):
            data = data[int(part)]
        else:
            raise ValidationFailure(f"Invalid path '{data_path}'{context}: cannot resolve '{part}'")
    return data


def parse_payload(
    payload: Union[Dict[str, Any], List[Any]],
    model_class: Type[T],
    schema: Optional[Dict[str, Any]] = None,
    data_path: str = "",
    name: Optional[str] = None,
) -> T:
    """Validate ``payload`` against ``schema`` (when given), then build ``model_class`` from ``data_path``.

    Both failure kinds surface as ``ValidationFailure`` with the offending data previewed.
    """
    context = f" for {name}" if name else ""
    if schema is not None:
        validate_schema(payload, schema, name)
    data = _extract(payload, data_path, context) if data_path else payload
    try:
        return model_class.model_validate(data)
    except ValidationError as error:
        preview = json.dumps(data, default=str)[:200]
        raise ValidationFailure(f"Cannot parse {model_class.__name__}{context}: {error.errors()} (data: {preview})")
