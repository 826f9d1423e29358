"""Per-sample training records: the layer tape, the loss terms and their gradients.

Arrays here are plain ``np.ndarray`` (not ``FloatArray``): they are scratch
values of one step and are neither copied nor frozen.
"""

from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from models.network import LayerSpec

Gradients = Dict[str, np.ndarray]

_RECORD_CONFIG = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class RobustnessLoss(BaseModel):
    """Hinge value with its gradients for the logit means and covariance."""

    model_config = _RECORD_CONFIG

    value: float = Field(ge=0.0)
    grad_mu: np.ndarray
    grad_cov: np.ndarray
    runner_up: int = Field(ge=0)
    active: bool
    degenerate: bool


class LayerRecord(BaseModel):
    model_config = _RECORD_CONFIG

    layer: LayerSpec
    input_shape: Tuple[int, ...]
    cache: Dict[str, np.ndarray] = Field(default_factory=dict)
    branch: Optional["GradientTape"] = None


class GradientTape(BaseModel):
    """Forward values recorded per layer, consumed in reverse by ``backward_all``."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tau: float = Field(ge=1.0)
    records: List[LayerRecord] = Field(default_factory=list)


LayerRecord.model_rebuild()


class SampleLoss(BaseModel):
    model_config = _RECORD_CONFIG

    total: float
    loss_c: float
    loss_cr: float
    grads: Gradients
    degenerate: bool
