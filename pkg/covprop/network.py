"""Point evaluation, builders and the model file container for ``NetworkSpec``.

Images are ``(height, width, channels)`` arrays; batches add a leading axis.
Convolution is im2col followed by one matrix product with the stored
``(k*k*in_channels, out_channels)`` weight matrix, so the moment rules in
``covprop.moments`` reuse exactly the same reshaped weights.
"""

import json
import logging
import math
import struct
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from constants.common import MODEL_FORMAT_VERSION, MODEL_MAGIC
from covprop.errors import (
    CovPropError,
    ModelFormatError,
    ShapeError,
    ShapeInconsistencyError,
    TruncatedPayloadError,
    ValidationFailure,
    VersionMismatchError,
)
from covprop.numkit import seeded_rng
from models.network import (
    AvgPoolLayer,
    ConvLayer,
    FlattenLayer,
    LayerSpec,
    LinearLayer,
    NetworkSpec,
    NormalizeLayer,
    ReLULayer,
    ResidualLayer,
    Shape,
)
from schemas.network import MODEL_METADATA_SCHEMA
from utils.schema_validation import validate_schema

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sIQ")
_ARRAY_FIELDS = ("weights", "bias", "mu_prime", "sigma_prime")

DEFAULT_LENET_WIDTHS = (8, 16, 32)
DEFAULT_LENET_HIDDEN = 64
DEFAULT_RESIDUAL_WIDTH = 8
DEFAULT_TOY_WIDTH = 4


# ---------------------------------------------------------------------------
# im2col
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(images: np.ndarray, kernel: int, stride: int, padding: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Unfold ``(B, H, W, C)`` into ``(B*out_h*out_w, k*k*C)`` patches in (ky, kx, c) order."""
    batch, height, width, channels = images.shape
    out_h = conv_output_size(height, kernel, stride, padding)
    out_w = conv_output_size(width, kernel, stride, padding)
    padded = np.pad(images, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((batch, out_h, out_w, kernel, kernel, channels), dtype=np.float64)
    for ky in range(kernel):
        for kx in range(kernel):
            rows = slice(ky, ky + stride * out_h, stride)
            columns = slice(kx, kx + stride * out_w, stride)
            cols[:, :, :, ky, kx, :] = padded[:, rows, columns, :]
    return cols.reshape(batch * out_h * out_w, kernel * kernel * channels), (out_h, out_w)


def col2im(cols: np.ndarray, image_shape: Tuple[int, ...], kernel: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``im2col``: scatter-add patch rows back onto a ``(B, H, W, C)`` grid."""
    batch, height, width, channels = image_shape
    out_h = conv_output_size(height, kernel, stride, padding)
    out_w = conv_output_size(width, kernel, stride, padding)
    patches = cols.reshape(batch, out_h, out_w, kernel, kernel, channels)
    padded = np.zeros((batch, height + 2 * padding, width + 2 * padding, channels), dtype=np.float64)
    for ky in range(kernel):
        for kx in range(kernel):
            rows = slice(ky, ky + stride * out_h, stride)
            columns = slice(kx, kx + stride * out_w, stride)
            padded[:, rows, columns, :] += patches[:, :, :, ky, kx, :]
    return padded[:, padding : padding + height, padding : padding + width, :]


# ---------------------------------------------------------------------------
# Point forward
# ---------------------------------------------------------------------------


def apply_layer(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Evaluate one layer on a batch ``(B, H, W, C)``."""
    if isinstance(layer, ConvLayer):
        cols, (out_h, out_w) = im2col(x, layer.kernel, layer.stride, layer.padding)
        out = cols @ layer.weights + layer.bias
        return out.reshape(x.shape[0], out_h, out_w, layer.out_channels)
    if isinstance(layer, LinearLayer):
        out = x.reshape(x.shape[0], -1) @ layer.weights + layer.bias
        return out.reshape(x.shape[0], 1, 1, layer.out_dim)
    if isinstance(layer, AvgPoolLayer):
        batch, height, width, channels = x.shape
        k = layer.kernel
        return x.reshape(batch, height // k, k, width // k, k, channels).mean(axis=(2, 4))
    if isinstance(layer, ReLULayer):
        return np.maximum(x, 0.0)
    if isinstance(layer, NormalizeLayer):
        if not layer.enabled:
            return x
        return (x - layer.mu_prime) / layer.sigma_prime
    if isinstance(layer, ResidualLayer):
        branch = x
        for inner in layer.branch:
            branch = apply_layer(inner, branch)
        return x + branch
    if isinstance(layer, FlattenLayer):
        return x
    raise ValidationFailure(f"unsupported layer kind {type(layer).__name__}")


def _as_batch(net: NetworkSpec, images: np.ndarray) -> np.ndarray:
    batch = np.asarray(images, dtype=np.float64)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(net.input_shape):
        raise ShapeError("image batch", (-1, *net.input_shape), batch.shape)
    return batch


def forward_trace(net: NetworkSpec, images: np.ndarray) -> List[np.ndarray]:
    """Input batch followed by the output of every top-level layer."""
    outputs = [_as_batch(net, images)]
    for layer in net.layers:
        outputs.append(apply_layer(layer, outputs[-1]))
    return outputs


def forward_batch(net: NetworkSpec, images: np.ndarray) -> np.ndarray:
    """Logits ``(B, C)`` for a batch of images."""
    x = _as_batch(net, images)
    for layer in net.layers:
        x = apply_layer(layer, x)
    return x.reshape(x.shape[0], net.class_count)


def forward(net: NetworkSpec, image: np.ndarray) -> np.ndarray:
    """Logits ``u_theta(x)`` for one image; ``argmax`` gives the base prediction."""
    image = np.asarray(image, dtype=np.float64)
    if tuple(image.shape) != tuple(net.input_shape):
        raise ShapeError("input image", net.input_shape, image.shape)
    return forward_batch(net, image[np.newaxis])[0]


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _he_conv(
    rng: np.random.Generator, in_channels: int, out_channels: int, kernel: int, padding: int, stride: int = 1
) -> ConvLayer:
    fan_in = kernel * kernel * in_channels
    weights = rng.standard_normal((fan_in, out_channels)) * math.sqrt(2.0 / fan_in)
    return ConvLayer(
        in_channels=in_channels,
        out_channels=out_channels,
        kernel=kernel,
        stride=stride,
        padding=padding,
        weights=weights,
        bias=np.zeros(out_channels),
    )


def _he_linear(rng: np.random.Generator, in_dim: int, out_dim: int) -> LinearLayer:
    weights = rng.standard_normal((in_dim, out_dim)) * math.sqrt(2.0 / in_dim)
    return LinearLayer(in_dim=in_dim, out_dim=out_dim, weights=weights, bias=np.zeros(out_dim))


def build_lenet_small(
    in_shape: Shape,
    class_count: int,
    seed: int,
    widths: Sequence[int] = DEFAULT_LENET_WIDTHS,
    hidden: int = DEFAULT_LENET_HIDDEN,
    pool_sizes: Optional[Sequence[int]] = None,
) -> NetworkSpec:
    """Three conv-ReLU-avgpool stages then Linear-ReLU-Linear.

    Convolutions are 3x3 with padding 1. When ``pool_sizes`` is omitted each
    stage pools by 2 while both spatial sizes are even and by 1 otherwise,
    so (28, 28, 1) runs 28 -> 14 -> 7 -> 7.
    """
    height, width, channels = in_shape
    if len(widths) != 3:
        raise ValidationFailure(f"LeNet builder expects three conv widths, got {len(widths)}")
    rng = seeded_rng(seed)
    layers: List[LayerSpec] = []
    for stage, out_channels in enumerate(widths):
        if pool_sizes is None:
            pool = 2 if height % 2 == 0 and width % 2 == 0 else 1
        else:
            pool = pool_sizes[stage]
        if height % pool or width % pool:
            raise ShapeError(f"LeNet stage {stage} pooling by {pool}", (pool, pool), (height, width))
        layers += [_he_conv(rng, channels, out_channels, 3, 1), ReLULayer(), AvgPoolLayer(kernel=pool)]
        height, width, channels = height // pool, width // pool, out_channels
    flat = height * width * channels
    layers += [FlattenLayer(), _he_linear(rng, flat, hidden), ReLULayer(), _he_linear(rng, hidden, class_count)]
    return NetworkSpec(input_shape=tuple(in_shape), layers=layers, class_count=class_count)


def build_residual_small(
    in_shape: Shape,
    class_count: int,
    blocks: int,
    seed: int,
    width: int = DEFAULT_RESIDUAL_WIDTH,
) -> NetworkSpec:
    """Conv stem, ``blocks`` residual conv-ReLU-conv branches, global average pool, one Linear head."""
    height, image_width, channels = in_shape
    if blocks < 0:
        raise ValidationFailure(f"blocks must be non-negative, got {blocks}")
    rng = seeded_rng(seed)
    layers: List[LayerSpec] = [_he_conv(rng, channels, width, 3, 1), ReLULayer()]
    for _ in range(blocks):
        branch = [_he_conv(rng, width, width, 3, 1), ReLULayer(), _he_conv(rng, width, width, 3, 1)]
        layers += [ResidualLayer(branch=branch), ReLULayer()]
    pool = math.gcd(height, image_width)
    layers += [AvgPoolLayer(kernel=pool), FlattenLayer()]
    flat = (height // pool) * (image_width // pool) * width
    layers.append(_he_linear(rng, flat, class_count))
    return NetworkSpec(input_shape=tuple(in_shape), layers=layers, class_count=class_count)


def build_linear(in_shape: Shape, class_count: int, hidden: Sequence[int] = (), seed: int = 0) -> NetworkSpec:
    """Flatten followed by Linear(-ReLU-Linear)* layers."""
    rng = seeded_rng(seed)
    dims = [int(np.prod(in_shape)), *hidden, class_count]
    layers: List[LayerSpec] = [FlattenLayer()]
    for index, (in_dim, out_dim) in enumerate(zip(dims[:-1], dims[1:])):
        if index:
            layers.append(ReLULayer())
        layers.append(_he_linear(rng, in_dim, out_dim))
    return NetworkSpec(input_shape=tuple(in_shape), layers=layers, class_count=class_count)


def build_toy_convnet(
    in_shape: Shape, class_count: int, seed: int, width: int = DEFAULT_TOY_WIDTH, overlapping: bool = False
) -> NetworkSpec:
    """Conv-ReLU-AvgPool(2) and a single Linear head; sized for the toy dataset.

    The default convolution is 2x2 with stride 2: its windows do not overlap,
    so neighbouring output pixels see disjoint input noise. ``overlapping``
    switches to 3x3, stride 1, padding 1. Those windows correlate neighbouring
    pixels and the pooling rule then under-estimates their variance.
    """
    height, image_width, channels = in_shape
    if height < 2 or image_width < 2:
        raise ValidationFailure(f"toy convnet needs at least a 2x2 input, got {in_shape}")
    rng = seeded_rng(seed)
    kernel, padding, stride = (3, 1, 1) if overlapping else (2, 0, 2)
    conv_h, conv_w = height // stride, image_width // stride
    pool = 2 if conv_h % 2 == 0 and conv_w % 2 == 0 else 1
    layers: List[LayerSpec] = [
        _he_conv(rng, channels, width, kernel, padding, stride=stride),
        ReLULayer(),
        AvgPoolLayer(kernel=pool),
    ]
    flat = (conv_h // pool) * (conv_w // pool) * width
    layers += [FlattenLayer(), _he_linear(rng, flat, class_count)]
    return NetworkSpec(input_shape=tuple(in_shape), layers=layers, class_count=class_count)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _walk(layers: Sequence[LayerSpec], prefix: str = "") -> Iterator[Tuple[str, LayerSpec]]:
    for index, layer in enumerate(layers):
        path = f"{prefix}{index}"
        yield path, layer
        if isinstance(layer, ResidualLayer):
            yield from _walk(layer.branch, f"{path}.branch.")


def iter_parameters(net: NetworkSpec) -> Iterator[Tuple[str, np.ndarray]]:
    """Yield ``("<path>.weights", array)`` / ``("<path>.bias", array)`` for every conv and linear layer."""
    for path, layer in _walk(net.layers):
        if isinstance(layer, (ConvLayer, LinearLayer)):
            yield f"{path}.weights", layer.weights
            yield f"{path}.bias", layer.bias


def _replace_in(layers: Sequence[LayerSpec], updates: Mapping[str, np.ndarray], prefix: str) -> List[LayerSpec]:
    rebuilt: List[LayerSpec] = []
    for index, layer in enumerate(layers):
        path = f"{prefix}{index}"
        fields = dict(layer)
        changed = False
        if isinstance(layer, ResidualLayer):
            branch = _replace_in(layer.branch, updates, f"{path}.branch.")
            if any(new is not old for new, old in zip(branch, layer.branch)):
                fields["branch"] = branch
                changed = True
        for name in ("weights", "bias"):
            key = f"{path}.{name}"
            if key in updates:
                current = getattr(layer, name)
                value = np.asarray(updates[key], dtype=np.float64)
                if value.shape != current.shape:
                    raise ShapeError(f"parameter {key}", current.shape, value.shape)
                fields[name] = value
                changed = True
        rebuilt.append(type(layer).model_validate(fields) if changed else layer)
    return rebuilt


def replace_parameters(net: NetworkSpec, params: Mapping[str, np.ndarray]) -> NetworkSpec:
    """Return a new network with the addressed parameter arrays swapped in."""
    known = {name for name, _ in iter_parameters(net)}
    unknown = sorted(set(params) - known)
    if unknown:
        raise ValidationFailure(f"unknown parameter paths: {unknown}")
    layers = _replace_in(net.layers, params, "")
    return NetworkSpec(input_shape=net.input_shape, layers=layers, class_count=net.class_count)


def _layers_equal(a: Sequence[LayerSpec], b: Sequence[LayerSpec]) -> bool:
    if len(a) != len(b):
        return False
    for left, right in zip(a, b):
        if type(left) is not type(right):
            return False
        for name in type(left).model_fields:
            lhs, rhs = getattr(left, name), getattr(right, name)
            if isinstance(lhs, np.ndarray):
                if lhs.shape != rhs.shape or not np.array_equal(lhs, rhs):
                    return False
            elif name == "branch":
                if not _layers_equal(lhs, rhs):
                    return False
            elif lhs != rhs:
                return False
    return True


def networks_equal(a: NetworkSpec, b: NetworkSpec) -> bool:
    """Structural equality with bit-exact parameter comparison."""
    return (
        tuple(a.input_shape) == tuple(b.input_shape)
        and a.class_count == b.class_count
        and _layers_equal(a.layers, b.layers)
    )


# ---------------------------------------------------------------------------
# Model file container
# ---------------------------------------------------------------------------


def _layer_metadata(layer: LayerSpec, blobs: List[np.ndarray]) -> Dict:
    if isinstance(layer, ResidualLayer):
        return {"kind": "residual", "branch": [_layer_metadata(inner, blobs) for inner in layer.branch]}
    array_names = [name for name in _ARRAY_FIELDS if name in type(layer).model_fields]
    meta = layer.model_dump(exclude=set(array_names))
    if array_names:
        meta["arrays"] = []
        for name in array_names:
            array = getattr(layer, name)
            meta["arrays"].append({"name": name, "shape": list(array.shape)})
            blobs.append(array)
    return meta


def save(net: NetworkSpec) -> bytes:
    """Serialize to ``magic | u32 version | u64 json length | json | float64 LE blobs``."""
    blobs: List[np.ndarray] = []
    metadata = {
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "layers": [_layer_metadata(layer, blobs) for layer in net.layers],
    }
    payload = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts = [_HEADER.pack(MODEL_MAGIC, MODEL_FORMAT_VERSION, len(payload)), payload]
    parts += [np.ascontiguousarray(blob, dtype="<f8").tobytes() for blob in blobs]
    return b"".join(parts)


class _BlobReader:
    def __init__(self, data: bytes, offset: int):
        self._data = data
        self.offset = offset

    def take(self, shape: Sequence[int]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        end = self.offset + 8 * count
        if end > len(self._data):
            raise TruncatedPayloadError(
                f"weight blob of shape {tuple(shape)} needs bytes {self.offset}..{end}, file has {len(self._data)}"
            )
        array = np.frombuffer(self._data, dtype="<f8", count=count, offset=self.offset).reshape(shape)
        self.offset = end
        return array.astype(np.float64)


def _layer_from_metadata(meta: Dict, reader: _BlobReader) -> Dict:
    fields = {key: value for key, value in meta.items() if key != "arrays"}
    if meta["kind"] == "residual":
        fields["branch"] = [_layer_from_metadata(inner, reader) for inner in meta.get("branch", [])]
    for entry in meta.get("arrays", []):
        fields[entry["name"]] = reader.take(entry["shape"])
    return fields


def load(data: bytes) -> NetworkSpec:
    """Decode a model file produced by :func:`save`."""
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"model file has {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, length = _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise VersionMismatchError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != MODEL_FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version}, this build reads {MODEL_FORMAT_VERSION}")
    start = _HEADER.size
    if start + length > len(data):
        raise TruncatedPayloadError(f"metadata declares {length} bytes, only {len(data) - start} present")
    try:
        metadata = json.loads(data[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"metadata is not valid JSON: {exc}") from exc
    validate_schema(metadata, MODEL_METADATA_SCHEMA, "model metadata", error_cls=ModelFormatError)

    reader = _BlobReader(data, start + length)
    layers = [_layer_from_metadata(meta, reader) for meta in metadata["layers"]]
    if reader.offset != len(data):
        raise ShapeInconsistencyError(f"{len(data) - reader.offset} trailing bytes after the declared weight blobs")
    try:
        net = NetworkSpec(
            input_shape=tuple(metadata["input_shape"]),
            layers=layers,
            class_count=metadata["class_count"],
        )
    except (ValidationError, CovPropError) as exc:
        raise ShapeInconsistencyError(f"stored layers do not form a valid network: {exc}") from exc
    logger.debug("Loaded network with %d top-level layers", len(net.layers))
    return net
