from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from models.arrays import FloatArray
from models.network import NetworkSpec

ABSTAIN = -1


class CertResult(BaseModel):
    """Top-2 certification outcome for one input."""

    model_config = ConfigDict(frozen=True)

    predicted: int = Field(ge=0)
    runner_up: int = Field(ge=0)
    p_lower: float = Field(ge=0.0, le=1.0)
    radius: float = Field(ge=0.0)
    margin_z: float

    @model_validator(mode="after")
    def distinct_classes(self) -> "CertResult":
        if self.predicted == self.runner_up:
            raise ValueError("predicted and runner_up must differ")
        return self


class CertificationRow(BaseModel):
    """One line of the certification table; radius is 0 when the prediction is wrong."""

    model_config = ConfigDict(frozen=True)

    sample_id: int
    true_label: int
    predicted: int
    p_lower: float
    radius: float = Field(ge=0.0)

    @property
    def correct(self) -> bool:
        return self.predicted == self.true_label


class MCReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    predicted: int
    class_counts: List[int]
    n_samples: int = Field(ge=0)
    p_lower: float = Field(ge=0.0, le=1.0)
    radius: float = Field(ge=0.0)
    abstained: bool

    @model_validator(mode="after")
    def counts_and_abstention_consistent(self) -> "MCReport":
        if sum(self.class_counts) != self.n_samples:
            raise ValueError(f"class counts sum to {sum(self.class_counts)}, expected {self.n_samples}")
        if self.abstained and (self.radius != 0.0 or self.predicted != ABSTAIN):
            raise ValueError("an abstaining report carries radius 0 and predicted == ABSTAIN")
        if not self.abstained and self.p_lower <= 0.5:
            raise ValueError("a certified report needs p_lower > 0.5")
        return self


class EpochMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    epoch: int
    clean_acc: float
    acr: float
    mean_loss_c: float
    mean_loss_cr: float


class LayerMoments(BaseModel):
    """Monte Carlo statistics of one layer's output under input noise."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    layer_index: int
    layer_kind: str
    n_samples: int
    mean_grid: FloatArray
    cov: FloatArray
    max_cross_corr: float = Field(ge=0.0)
    pre_activation: bool = False

    @property
    def mean_variance(self) -> float:
        """Mean diagonal entry of the pooled covariance, the per-layer scalar compared against the bound."""
        return float(np.mean(np.diag(self.cov))) if self.cov.size else 0.0


class GaussianityExport(BaseModel):
    """Sampled channel pairs at one pixel with the propagated covariance ellipse."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    layer_index: int
    pixel: Tuple[int, int]
    channels: Tuple[int, int]
    samples: FloatArray
    center: FloatArray
    propagated_cov: FloatArray
    semi_major: float
    semi_minor: float
    angle: float


class CrosscheckRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample_id: int
    predicted: int
    prop_radius: float
    mc_radius: float
    abstained: bool
    eligible: bool
    within_tolerance: bool


class CrosscheckReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: List[CrosscheckRow]
    tolerance: float
    radius_cap: float

    @property
    def eligible_count(self) -> int:
        return sum(row.eligible for row in self.rows)

    @property
    def pass_fraction(self) -> Optional[float]:
        """Share of eligible samples whose MC radius is within tolerance of the propagated radius.

        ``None`` when no sample is eligible: the check has nothing to say then.
        """
        eligible = [row for row in self.rows if row.eligible]
        if not eligible:
            return None
        return sum(row.within_tolerance for row in eligible) / len(eligible)


class TrainingResult(BaseModel):
    """Trained network with one metrics row per epoch."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    network: NetworkSpec
    metrics: List[EpochMetrics]


class BookkeepingRow(BaseModel):
    """Matrices a naive cross-pixel bookkeeping needs ``layers_back`` layers before the output."""

    model_config = ConfigDict(frozen=True)

    layers_back: int = Field(ge=0)
    sigma_count: int = Field(ge=1)
    cross_count: int = Field(ge=0)


class MemoryFootprint(BaseModel):
    model_config = ConfigDict(frozen=True)

    height: int = Field(ge=1)
    width: int = Field(ge=1)
    channels: int = Field(ge=1)
    traditional: int
    brute_force: float
    shared_covariance: int


class SweepRow(BaseModel):
    """One training run of a hyper-parameter sweep, scored on held-out data."""

    model_config = ConfigDict(frozen=True)

    parameter: str
    value: float
    seed: int
    clean_acc: float = Field(ge=0.0, le=1.0)
    acr: float = Field(ge=0.0)


class NoisyLabelRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int
    noise_rate: float
    naive_acc: float = Field(ge=0.0, le=1.0)
    finetuned_acc: float = Field(ge=0.0, le=1.0)
