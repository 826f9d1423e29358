from typing import Any, Dict, List, Optional, Type

import jsonschema
from jsonschema import validators
from jsonschema.validators import Draft202012Validator

from covprop.errors import CovPropError, ValidationFailure


def format_validation_error(error: jsonschema.ValidationError) -> str:
    """Format a validation error with path and instance details."""
    path = "/".join(str(part) for part in error.absolute_path) if error.absolute_path else ""
    path_info = f" at path '{path}'" if path else ""
    instance = repr(error.instance)
    return f"{error.message}{path_info}. Instance: {instance[:80]}"


class SchemaValidator:
    """Validators compiled once per schema ``$id`` (or object identity when absent)."""

    _schema_cache: Dict[Any, Draft202012Validator] = {}

    @classmethod
    def get_validator(cls, schema: Dict[str, Any]) -> Draft202012Validator:
        key = schema.get("$id", id(schema))
        if key not in cls._schema_cache:
            validator_cls = validators.validator_for(schema)
            validator_cls.check_schema(schema)
            cls._schema_cache[key] = validator_cls(schema)
        return cls._schema_cache[key]

    @classmethod
    def validate(cls, instance: Any, schema: Dict[str, Any]) -> List[str]:
        """Validate instance against schema and return all errors, shallowest first."""
        validator = cls.get_validator(schema)
        errors = sorted(validator.iter_errors(instance), key=lambda e: len(e.absolute_path))
        return [format_validation_error(error) for error in errors]


def validate_schema(
    data: Any,
    schema: Dict[str, Any],
    name: Optional[str] = None,
    error_cls: Type[CovPropError] = ValidationFailure,
) -> bool:
    """Validate ``data`` against ``schema``; raise ``error_cls`` listing every violation."""
    errors = SchemaValidator.validate(data, schema)
    if errors:
        context = f" for {name}" if name else ""
        raise error_cls(f"Schema validation failed{context}: {'; '.join(errors)}")
    return True
