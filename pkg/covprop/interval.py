"""Interval bound propagation, the box baseline the covariance bound is compared against."""

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np

from constants.common import DEFAULT_BOX_MULTIPLIER
from constants.datasets import CSV_COLUMNS
from covprop.errors import ShapeError, ValidationFailure
from covprop.moments import propagate_all
from covprop.network import apply_layer, im2col
from models.configs import BoundConfig
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
)
from models.states import IntervalState
from utils.csv_export import write_csv_rows

logger = logging.getLogger(__name__)


def init_interval(image: np.ndarray, sigma: float, width_multiplier: float = DEFAULT_BOX_MULTIPLIER) -> IntervalState:
    """Box of half-width ``width_multiplier * sigma`` around every input entry."""
    if sigma < 0 or width_multiplier < 0:
        raise ValidationFailure(f"box half-width needs sigma >= 0 and multiplier >= 0, got {sigma}, {width_multiplier}")
    image = np.asarray(image, dtype=np.float64)
    half_width = width_multiplier * sigma
    return IntervalState(lower=image - half_width, upper=image + half_width)


def _from_center(center: np.ndarray, radius: np.ndarray, index: int, kind: str) -> IntervalState:
    return IntervalState(lower=center - radius, upper=center + radius, layer_index=index, layer_kind=kind)


def _interval_layer(state: IntervalState, layer: LayerSpec) -> IntervalState:
    index = state.layer_index + 1
    if isinstance(layer, ConvLayer):
        layer.output_shape(tuple(state.lower.shape))
        center = apply_layer(layer, state.center[np.newaxis])[0]
        cols, (out_h, out_w) = im2col(state.radius[np.newaxis], layer.kernel, layer.stride, layer.padding)
        radius = (cols @ np.abs(layer.weights)).reshape(out_h, out_w, layer.out_channels)
        return _from_center(center, radius, index, "conv")
    if isinstance(layer, LinearLayer):
        if state.lower.size != layer.in_dim:
            raise ShapeError("linear input size", (layer.in_dim,), (state.lower.size,))
        center = state.center.reshape(-1) @ layer.weights + layer.bias
        radius = state.radius.reshape(-1) @ np.abs(layer.weights)
        return _from_center(center.reshape(1, 1, -1), radius.reshape(1, 1, -1), index, "linear")
    if isinstance(layer, AvgPoolLayer):
        layer.output_shape(tuple(state.lower.shape))
        lower = apply_layer(layer, state.lower[np.newaxis])[0]
        upper = apply_layer(layer, state.upper[np.newaxis])[0]
        return IntervalState(lower=lower, upper=upper, layer_index=index, layer_kind="avgpool")
    if isinstance(layer, ReLULayer):
        return IntervalState(
            lower=np.maximum(state.lower, 0.0), upper=np.maximum(state.upper, 0.0), layer_index=index, layer_kind="relu"
        )
    if isinstance(layer, NormalizeLayer):
        if not layer.enabled:
            return state.model_copy(update={"layer_index": index, "layer_kind": "normalize"})
        lower = (state.lower - layer.mu_prime) / layer.sigma_prime
        upper = (state.upper - layer.mu_prime) / layer.sigma_prime
        return IntervalState(lower=lower, upper=upper, layer_index=index, layer_kind="normalize")
    if isinstance(layer, FlattenLayer):
        return state.model_copy(update={"layer_index": index, "layer_kind": "flatten"})
    if isinstance(layer, ResidualLayer):
        branch = state
        for inner in layer.branch:
            branch = _interval_layer(branch, inner)
        if branch.lower.shape != state.lower.shape:
            raise ShapeError("residual branch output", state.lower.shape, branch.lower.shape)
        return IntervalState(
            lower=state.lower + branch.lower,
            upper=state.upper + branch.upper,
            layer_index=index,
            layer_kind="residual",
        )
    raise ValidationFailure(f"unsupported layer kind {type(layer).__name__}")


def interval_trace(net: NetworkSpec, state: IntervalState) -> List[IntervalState]:
    """Initial box followed by the box after every top-level layer."""
    if tuple(state.lower.shape) != tuple(net.input_shape):
        raise ShapeError("initial box", net.input_shape, state.lower.shape)
    trace = [state]
    for index, layer in enumerate(net.layers, start=1):
        current = _interval_layer(trace[-1], layer)
        if current.layer_index != index:
            current = current.model_copy(update={"layer_index": index})
        trace.append(current)
    return trace


def propagate_interval(net: NetworkSpec, state: IntervalState) -> IntervalState:
    return interval_trace(net, state)[-1]


def box_log_volume(state: IntervalState) -> float:
    """Mean over pixels of the summed log half-widths; ``-inf`` once any width collapses."""
    radius = state.radius
    if np.any(radius <= 0.0):
        return float("-inf")
    height, width, _ = radius.shape
    return float(np.sum(np.log(radius)) / (height * width))


def cov_log_volume(cov: np.ndarray) -> float:
    """``0.5 * log det(2 pi e Sigma)``, the per-pixel Gaussian entropy."""
    sign, logdet = np.linalg.slogdet(2.0 * np.pi * np.e * cov)
    if sign <= 0:
        return float("-inf")
    return float(0.5 * logdet)


def tightness_report(
    net: NetworkSpec,
    image: np.ndarray,
    cfg: BoundConfig,
    width_multiplier: float = DEFAULT_BOX_MULTIPLIER,
) -> List[Dict[str, Union[int, str, float]]]:
    """Per-layer box and covariance volume proxies, input layer first."""
    _, moment_trace = propagate_all(net, image, cfg)
    boxes = interval_trace(net, init_interval(image, cfg.sigma_in, width_multiplier))
    rows = []
    for box, moments in zip(boxes, moment_trace):
        rows.append(
            {
                "layer_index": box.layer_index,
                "layer_kind": box.layer_kind,
                "box_log_volume": box_log_volume(box),
                "cov_log_volume": cov_log_volume(moments.cov),
            }
        )
    logger.debug("Tightness report over %d layers", len(rows))
    return rows


def write_tightness_csv(rows: Sequence[Dict], path: Union[str, Path]) -> int:
    return write_csv_rows(path, CSV_COLUMNS["tightness"], rows)
