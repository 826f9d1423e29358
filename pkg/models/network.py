"""Layer catalog and the network graph (the base classifier).

Shapes are (height, width, channels). Convolution weights are stored already
reshaped to ``(k*k*in_channels, out_channels)`` with rows ordered
(kernel_row, kernel_col, in_channel), i.e. the im2col patch order.
"""

from typing import Annotated, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from covprop.errors import ShapeError, ValidationFailure
from models.arrays import FloatArray

Shape = Tuple[int, int, int]

_LAYER_CONFIG = ConfigDict(frozen=True, arbitrary_types_allowed=True, extra="forbid")


class ConvLayer(BaseModel):
    """2-D convolution realised as im2col followed by a matrix product."""

    model_config = _LAYER_CONFIG

    kind: Literal["conv"] = "conv"
    in_channels: int = Field(gt=0)
    out_channels: int = Field(gt=0)
    kernel: int = Field(gt=0)
    stride: int = 1
    padding: int = Field(default=0, ge=0)
    weights: FloatArray
    bias: FloatArray

    @field_validator("stride")
    @classmethod
    def stride_must_be_small(cls, value: int) -> int:
        if value not in (1, 2):
            raise ValueError("convolution stride must be 1 or 2")
        return value

    @model_validator(mode="after")
    def weights_match_declared_shape(self) -> "ConvLayer":
        expected = (self.kernel * self.kernel * self.in_channels, self.out_channels)
        if self.weights.shape != expected:
            raise ValueError(f"conv weights must have shape {expected}, got {self.weights.shape}")
        if self.bias.shape != (self.out_channels,):
            raise ValueError(f"conv bias must have shape ({self.out_channels},), got {self.bias.shape}")
        return self

    def output_shape(self, shape: Shape) -> Shape:
        height, width, channels = shape
        if channels != self.in_channels:
            raise ShapeError("conv input channels", (height, width, self.in_channels), shape)
        out_h = (height + 2 * self.padding - self.kernel) // self.stride + 1
        out_w = (width + 2 * self.padding - self.kernel) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv kernel {self.kernel} does not fit input", (self.kernel, self.kernel), shape)
        return out_h, out_w, self.out_channels


class LinearLayer(BaseModel):
    """Fully connected layer ``h = W^T x + b``; spatial inputs are flattened in (h, w, c) order."""

    model_config = _LAYER_CONFIG

    kind: Literal["linear"] = "linear"
    in_dim: int = Field(gt=0)
    out_dim: int = Field(gt=0)
    weights: FloatArray
    bias: FloatArray

    @model_validator(mode="after")
    def weights_match_declared_shape(self) -> "LinearLayer":
        if self.weights.shape != (self.in_dim, self.out_dim):
            raise ValueError(f"linear weights must have shape {(self.in_dim, self.out_dim)}, got {self.weights.shape}")
        if self.bias.shape != (self.out_dim,):
            raise ValueError(f"linear bias must have shape ({self.out_dim},), got {self.bias.shape}")
        return self

    def output_shape(self, shape: Shape) -> Shape:
        height, width, channels = shape
        if height * width * channels != self.in_dim:
            raise ShapeError("linear input size", (self.in_dim,), (height * width * channels,))
        return 1, 1, self.out_dim


class AvgPoolLayer(BaseModel):
    """Non-overlapping average pooling (stride equals kernel)."""

    model_config = _LAYER_CONFIG

    kind: Literal["avgpool"] = "avgpool"
    kernel: int = Field(gt=0)
    stride: Optional[int] = None

    @model_validator(mode="after")
    def stride_equals_kernel(self) -> "AvgPoolLayer":
        if self.stride is not None and self.stride != self.kernel:
            raise ValueError("average pooling windows must not overlap (stride == kernel)")
        return self

    def output_shape(self, shape: Shape) -> Shape:
        height, width, channels = shape
        if height % self.kernel or width % self.kernel:
            raise ShapeError(f"avgpool kernel {self.kernel} must divide input", (self.kernel, self.kernel), shape)
        return height // self.kernel, width // self.kernel, channels


class ReLULayer(BaseModel):
    model_config = _LAYER_CONFIG

    kind: Literal["relu"] = "relu"

    def output_shape(self, shape: Shape) -> Shape:
        return shape


class FlattenLayer(BaseModel):
    """Marker before the first Linear layer; flattening itself happens inside that layer."""

    model_config = _LAYER_CONFIG

    kind: Literal["flatten"] = "flatten"

    def output_shape(self, shape: Shape) -> Shape:
        return shape


class NormalizeLayer(BaseModel):
    """``h = (x - mu') / sigma'`` per channel.

    ``mode="fixed"`` broadcasts a scalar sigma'; ``mode="batch"`` carries one sigma'
    per channel and divides the covariance element-wise by sigma' sigma'^T.
    Disabled layers are carried in the file but skipped by every propagation.
    """

    model_config = _LAYER_CONFIG

    kind: Literal["normalize"] = "normalize"
    mu_prime: FloatArray
    sigma_prime: FloatArray
    enabled: bool = False
    mode: Literal["fixed", "batch"] = "fixed"

    @model_validator(mode="after")
    def sigma_prime_positive(self) -> "NormalizeLayer":
        if self.mu_prime.ndim != 1 or self.sigma_prime.ndim != 1:
            raise ValueError("mu_prime and sigma_prime must be vectors")
        if self.enabled and not (self.sigma_prime > 0).all():
            raise ValueError("sigma_prime entries must be > 0 when normalization is enabled")
        return self

    def output_shape(self, shape: Shape) -> Shape:
        for name, vector in (("mu_prime", self.mu_prime), ("sigma_prime", self.sigma_prime)):
            if vector.shape[0] not in (1, shape[2]):
                raise ShapeError(f"normalize {name}", (shape[2],), vector.shape)
        return shape


class ResidualLayer(BaseModel):
    """``out = x + branch(x)``; the branch must preserve the input shape."""

    model_config = _LAYER_CONFIG

    kind: Literal["residual"] = "residual"
    branch: List["LayerSpec"]

    @field_validator("branch")
    @classmethod
    def branch_not_empty(cls, value: list) -> list:
        if not value:
            raise ValueError("residual branch must contain at least one layer")
        return value

    def output_shape(self, shape: Shape) -> Shape:
        branch_shape = infer_shapes(self.branch, shape)[-1]
        if branch_shape != shape:
            raise ShapeError("residual branch output", shape, branch_shape)
        return shape


LayerSpec = Annotated[
    Union[ConvLayer, LinearLayer, AvgPoolLayer, ReLULayer, FlattenLayer, NormalizeLayer, ResidualLayer],
    Field(discriminator="kind"),
]
ResidualLayer.model_rebuild()

PARAMETRIC_LAYERS = (ConvLayer, LinearLayer)


def infer_shapes(layers: List[LayerSpec], input_shape: Shape) -> List[Shape]:
    """Return the input shape followed by every layer's output shape."""
    shapes = [tuple(input_shape)]
    for layer in layers:
        shapes.append(layer.output_shape(shapes[-1]))
    return shapes


class NetworkSpec(BaseModel):
    """Ordered layer graph ending in the logit layer ``u_theta``."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True, extra="forbid")

    input_shape: Shape
    layers: List[LayerSpec]
    class_count: int = Field(gt=0)

    @field_validator("input_shape")
    @classmethod
    def input_shape_positive(cls, value: Shape) -> Shape:
        if any(dim <= 0 for dim in value):
            raise ValueError(f"input shape entries must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def layers_chain(self) -> "NetworkSpec":
        if not self.layers:
            raise ValidationFailure("network has no layers")
        final = self.layers[-1]
        if not isinstance(final, LinearLayer) or final.out_dim != self.class_count:
            raise ValidationFailure(f"final layer must be Linear with out_dim == class_count ({self.class_count})")
        infer_shapes(self.layers, self.input_shape)
        return self

    @property
    def shapes(self) -> List[Shape]:
        return infer_shapes(self.layers, self.input_shape)

    @property
    def linear_count(self) -> int:
        return sum(isinstance(layer, LinearLayer) for layer in self.layers)
