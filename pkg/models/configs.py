"""Typed run configuration objects."""

import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from constants.common import (
    ABLATION_LAMBDA_EPOCH,
    DEFAULT_ALPHA,
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_GAMMA_MULTIPLIER,
    DEFAULT_LAMBDA,
    DEFAULT_LAMBDA_EPOCH,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MOMENTUM,
    DEFAULT_N,
    DEFAULT_N0,
    DEFAULT_R_MAX,
    DEFAULT_SEED,
    DEFAULT_SIGMA,
    FINETUNE_TOP_FRACTION,
    MC_BATCH_SIZE,
)

logger = logging.getLogger(__name__)


class BoundConfig(BaseModel):
    """Input noise level and the assumed bound on cross-pixel correlation."""

    model_config = ConfigDict(frozen=True)

    r_max: float = DEFAULT_R_MAX
    sigma_in: float = DEFAULT_SIGMA

    @field_validator("r_max")
    @classmethod
    def r_max_in_unit_interval(cls, value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise ValueError("r_max must lie in [0, 1)")
        return value

    @field_validator("sigma_in")
    @classmethod
    def sigma_non_negative(cls, value: float) -> float:
        # sigma == 0 degenerates to the point forward pass; certification itself needs sigma > 0
        if value < 0.0:
            raise ValueError("sigma_in must be non-negative")
        return value


class MCConfig(BaseModel):
    """Monte Carlo smoothing parameters (selection draws, estimation draws, confidence)."""

    model_config = ConfigDict(frozen=True)

    n0: int = Field(default=DEFAULT_N0, gt=0)
    n: int = Field(default=DEFAULT_N, gt=0)
    alpha: float = DEFAULT_ALPHA
    sigma: float = DEFAULT_SIGMA
    seed: int = DEFAULT_SEED
    batch_size: int = Field(default=MC_BATCH_SIZE, gt=0)

    @field_validator("alpha")
    @classmethod
    def alpha_in_open_interval(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        return value

    @field_validator("sigma")
    @classmethod
    def sigma_non_negative(cls, value: float) -> float:
        if value < 0.0:
            raise ValueError("sigma must be non-negative")
        return value

    @model_validator(mode="after")
    def warn_on_small_estimation_budget(self) -> "MCConfig":
        if self.n < 10 * self.n0:
            logger.warning("n=%d is below 10 x n0=%d; the estimate of p_A will be loose", self.n, self.n0)
        return self


class LossConfig(BaseModel):
    """Training objective and schedule: ``l = l_C + lambda * l_CR``."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: float = Field(default=DEFAULT_LAMBDA, ge=0.0, alias="lambda")
    gamma: Optional[float] = None  # defaults to DEFAULT_GAMMA_MULTIPLIER * sigma
    sigma: float = Field(default=DEFAULT_SIGMA, gt=0.0)
    r_max: float = Field(default=DEFAULT_R_MAX, ge=0.0, lt=1.0)
    lr_schedule: List[Tuple[int, float]] = [(0, DEFAULT_LEARNING_RATE)]
    lambda_activation_epoch: int = Field(default=DEFAULT_LAMBDA_EPOCH, ge=0)
    epochs: int = Field(default=DEFAULT_EPOCHS, gt=0)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, gt=0)
    momentum: float = Field(default=DEFAULT_MOMENTUM, ge=0.0, lt=1.0)
    top_fraction: float = Field(default=FINETUNE_TOP_FRACTION, ge=0.0, le=1.0)

    @field_validator("lr_schedule")
    @classmethod
    def schedule_sorted_and_positive(cls, value: List[Tuple[int, float]]) -> List[Tuple[int, float]]:
        if not value:
            raise ValueError("lr_schedule must not be empty")
        epochs = [epoch for epoch, _ in value]
        if epochs != sorted(epochs) or epochs[0] != 0:
            raise ValueError("lr_schedule must start at epoch 0 and be sorted by epoch")
        if any(rate <= 0 for _, rate in value):
            raise ValueError("learning rates must be positive")
        return value

    @model_validator(mode="after")
    def gamma_positive(self) -> "LossConfig":
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")
        return self

    @property
    def hinge_offset(self) -> float:
        return self.gamma if self.gamma is not None else DEFAULT_GAMMA_MULTIPLIER * self.sigma

    @property
    def bound(self) -> "BoundConfig":
        return BoundConfig(r_max=self.r_max, sigma_in=self.sigma)

    def learning_rate(self, epoch: int) -> float:
        rate = self.lr_schedule[0][1]
        for start, scheduled in self.lr_schedule:
            if epoch >= start:
                rate = scheduled
        return rate

    def robustness_weight(self, epoch: int) -> float:
        return self.lam if epoch >= self.lambda_activation_epoch else 0.0


class RunConfig(BaseModel):
    """Parsed command-line flags for one CLI command."""

    model_config = ConfigDict(frozen=True)

    command: Literal["certify", "mc-certify", "compare", "train", "cost", "toydata", "fetch-mnist", "ablate"]
    model: Optional[Path] = None
    data: Optional[Path] = None
    out: Optional[Path] = None
    resume: Optional[Path] = None
    sigma: float = DEFAULT_SIGMA
    rmax: float = DEFAULT_R_MAX
    lam: float = DEFAULT_LAMBDA
    gamma: Optional[float] = None
    n0: int = DEFAULT_N0
    n: int = DEFAULT_N
    alpha: float = DEFAULT_ALPHA
    seed: int = DEFAULT_SEED
    mode: Optional[str] = None
    epochs: int = DEFAULT_EPOCHS
    noise_rate: float = 0.0
    kernel: int = 3
    depth: int = 2
    shape: Optional[Tuple[int, int, int]] = None
    count: Optional[int] = None
    log_level: str = "INFO"

    @model_validator(mode="after")
    def flags_in_range(self) -> "RunConfig":
        if self.sigma <= 0:
            raise ValueError("--sigma must be positive")
        if not 0.0 <= self.rmax < 1.0:
            raise ValueError("--rmax must lie in [0, 1)")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("--noise-rate must lie in [0, 1)")
        if self.command == "cost" and self.mode != "memory" and (self.kernel < 2 or self.depth < 0):
            raise ValueError("cost needs --kernel >= 2 and --depth >= 0")
        return self

    def bound_config(self) -> BoundConfig:
        return BoundConfig(r_max=self.rmax, sigma_in=self.sigma)

    def mc_config(self) -> MCConfig:
        return MCConfig(n0=self.n0, n=self.n, alpha=self.alpha, sigma=self.sigma, seed=self.seed)

    def loss_config(self) -> LossConfig:
        """Training schedule for ``train`` and ``ablate``.

        Fine-tuning resumes a warm net, so its robustness term is on from epoch 0.
        """
        if self.mode == "finetune":
            activation = 0
        else:
            first = ABLATION_LAMBDA_EPOCH if self.command == "ablate" else DEFAULT_LAMBDA_EPOCH
            activation = min(first, self.epochs // 2)
        return LossConfig(
            lam=self.lam,
            gamma=self.gamma,
            sigma=self.sigma,
            r_max=self.rmax,
            epochs=self.epochs,
            lambda_activation_epoch=activation,
            lr_schedule=[(0, DEFAULT_LEARNING_RATE)],
            batch_size=DEFAULT_BATCH_SIZE,
            momentum=DEFAULT_MOMENTUM,
        )
