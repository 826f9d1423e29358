"""Annotated numpy array type usable as a pydantic field."""

from typing import Annotated, Any

import numpy as np
from pydantic import BeforeValidator, PlainSerializer


def _to_float_array(value: Any) -> np.ndarray:
    if isinstance(value, np.ndarray) and value.dtype == np.float64 and not value.flags.writeable:
        return value
    array = np.array(value, dtype=np.float64, copy=True)
    if not np.all(np.isfinite(array)):
        raise ValueError("array entries must be finite")
    array.setflags(write=False)
    return array


FloatArray = Annotated[
    np.ndarray,
    BeforeValidator(_to_float_array),
    PlainSerializer(lambda array: array.tolist(), return_type=list),
]
