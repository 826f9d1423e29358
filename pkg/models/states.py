"""Per-layer perturbation states carried by the propagation passes."""

from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from constants.common import PSD_TOL, SYMMETRY_TOL
from covprop.numkit import check_covariance, max_asymmetry
from models.arrays import FloatArray

_STATE_CONFIG = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class MomentState(BaseModel):
    """Per-pixel means ``(H, W, N)`` plus the single channel covariance ``(N, N)`` shared by every pixel."""

    model_config = _STATE_CONFIG

    means: FloatArray
    cov: FloatArray
    layer_index: int = Field(default=0, ge=0)
    layer_kind: str = "input"

    @model_validator(mode="after")
    def shapes_and_symmetry(self) -> "MomentState":
        if self.means.ndim != 3:
            raise ValueError(f"means must be (H, W, N), got shape {self.means.shape}")
        channels = self.means.shape[2]
        if self.cov.shape != (channels, channels):
            raise ValueError(f"cov must be ({channels}, {channels}), got {self.cov.shape}")
        scale = max(1.0, float(np.max(np.abs(self.cov)))) if self.cov.size else 1.0
        if max_asymmetry(self.cov) > SYMMETRY_TOL * scale:
            raise ValueError(f"cov is not symmetric (max asymmetry {max_asymmetry(self.cov):.3e})")
        return self

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.means.shape)

    @property
    def channels(self) -> int:
        return self.means.shape[2]

    @property
    def pixel_count(self) -> int:
        return self.means.shape[0] * self.means.shape[1]

    @property
    def sigma(self) -> np.ndarray:
        """Per-channel standard deviations, with round-off negatives clipped to 0."""
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def check_invariants(self, tol: float = PSD_TOL) -> None:
        """Eigen-decomposition PSD check; costly, so callers opt in."""
        check_covariance(self.cov, tol, where=f"layer {self.layer_index} ({self.layer_kind}) covariance")


class IntervalState(BaseModel):
    """Per-pixel ``[lower, upper]`` boxes of the interval baseline."""

    model_config = _STATE_CONFIG

    lower: FloatArray
    upper: FloatArray
    layer_index: int = Field(default=0, ge=0)
    layer_kind: str = "input"

    @model_validator(mode="after")
    def ordered_bounds(self) -> "IntervalState":
        if self.lower.shape != self.upper.shape or self.lower.ndim != 3:
            raise ValueError(f"bounds must share one (H, W, N) shape, got {self.lower.shape} and {self.upper.shape}")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        return self

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)
