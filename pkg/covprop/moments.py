"""Closed-form propagation of Gaussian perturbation moments.

Every layer state holds per-pixel means and one channel covariance shared by
all pixels. Convolutions would need the cross-covariances between the pixels
of a window; instead the joint covariance is bounded by an independent one
inflated by ``tau = 1 + r_max`` (the Hanebeck bound with ``kappa = 0``), so
only ``Sigma`` itself is ever stored.

Worked 1-D example, kernel 3, two stacked convolutions without overlap: the
output pixel depends on 3 pixels one layer back and 9 two layers back, and an
exact pass would track those 9 covariances plus 45 cross-correlation blocks.
With overlap (stride 1) the receptive field two layers back is 5 pixels and
still needs 15 cross blocks. The inflated bound replaces all of them by the one
``Sigma`` per layer; ``covprop.cost`` counts the bookkeeping for any depth.

Padding positions are unperturbed constants. Border outputs therefore see a
sub-block of ``kron(I, Sigma)`` and the shared covariance, computed from the
full window, dominates them.

Average pooling divides by ``k**2`` without the ``1 + r_max`` factor and the
residual merge assumes trunk and branch independent, exactly like the
convolution bound assumes decorrelated windows.
"""

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from constants.common import PSD_TOL
from constants.datasets import CSV_COLUMNS
from covprop.errors import DomainError, InvariantBreach, ShapeError, ValidationFailure
from covprop.network import apply_layer
from covprop.numkit import min_eigenvalue_sym, std_normal_cdf, std_normal_pdf
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
from models.states import MomentState
from utils.csv_export import write_csv_rows

logger = logging.getLogger(__name__)

_CONSTRAINT_SLACK = 1e-12


# ---------------------------------------------------------------------------
# Raw kernels (shared with covprop.train)
# ---------------------------------------------------------------------------


def block_quadratic(cov: np.ndarray, weights: np.ndarray, factor: float = 1.0) -> np.ndarray:
    """``factor * W^T kron(I_p, cov) W`` for ``W`` stacked from ``p`` slabs of ``N`` rows.

    Equals ``factor * sum_p W_p^T cov W_p``, evaluated as one product.
    """
    channels = cov.shape[0]
    out_dim = weights.shape[1]
    if weights.shape[0] % channels:
        raise ShapeError("weight rows per channel block", (channels,), weights.shape)
    slabs = weights.reshape(-1, channels, out_dim)
    projected = np.matmul(cov, slabs).reshape(-1, out_dim)
    result = weights.T @ projected
    return factor * 0.5 * (result + result.T)


def relu_moments(mu: np.ndarray, sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``E[max(0, X)]`` for ``X ~ N(mu, sigma^2)`` together with ``Phi(u)`` and ``phi(u)``, ``u = mu / sigma``.

    ``mu * Phi(u) + sigma * phi(u)`` is the erf form
    ``mu/2 - mu/2 * erf(-mu / (sqrt(2) sigma)) + sigma / sqrt(2 pi) * exp(-mu^2 / (2 sigma^2))``.
    Channels with ``sigma == 0`` reduce to the point ReLU.
    """
    sigma = np.broadcast_to(sigma, np.shape(mu))
    positive = sigma > 0.0
    safe_sigma = np.where(positive, sigma, 1.0)
    u = mu / safe_sigma
    cdf = np.where(positive, std_normal_cdf(u), (mu > 0.0).astype(np.float64))
    pdf = np.where(positive, std_normal_pdf(u), 0.0)
    mean = mu * cdf + np.where(positive, sigma, 0.0) * pdf
    return mean, cdf, pdf


def _advance(state: MomentState, means: np.ndarray, cov: np.ndarray, kind: str) -> MomentState:
    return MomentState(means=means, cov=cov, layer_index=state.layer_index + 1, layer_kind=kind)


def _pass_through(state: MomentState, kind: str) -> MomentState:
    return state.model_copy(update={"layer_index": state.layer_index + 1, "layer_kind": kind})


# ---------------------------------------------------------------------------
# Layer rules
# ---------------------------------------------------------------------------


def init_input(image: np.ndarray, cfg: BoundConfig) -> MomentState:
    """Input layer: means are the pixels, ``cov = sigma^2 I``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError("input image", (-1, -1, -1), image.shape)
    channels = image.shape[2]
    return MomentState(means=image, cov=cfg.sigma_in**2 * np.eye(channels))


def hanebeck_tau(r_max: float) -> Tuple[float, float]:
    """Inflation factors of the independent dominating covariance for correlations up to ``r_max``.

    Uses ``eta = 1 / (1 + r_max)`` and ``kappa = 0``; both factors become ``1 + r_max``.
    """
    if not 0.0 <= r_max < 1.0:
        raise ValidationFailure(f"r_max must lie in [0, 1), got {r_max}")
    eta = 1.0 / (1.0 + r_max)
    kappa = 0.0
    if not 0.5 - _CONSTRAINT_SLACK <= eta <= 1.0 / (1.0 + r_max) + _CONSTRAINT_SLACK:
        raise InvariantBreach(f"eta={eta} violates 0.5 <= eta <= 1/(1+r_max)")
    if kappa**2 > (1.0 - 2.0 * eta) / (1.0 - r_max**2) + eta**2 + _CONSTRAINT_SLACK:
        raise InvariantBreach(f"kappa={kappa} violates the joint constraint at eta={eta}")
    tau = 1.0 / eta
    return tau, tau


def _expect_channels(state: MomentState, channels: int, what: str) -> None:
    if state.channels != channels:
        raise ShapeError(what, (*state.shape[:2], channels), state.shape)


def propagate_conv(state: MomentState, layer: ConvLayer, cfg: BoundConfig) -> MomentState:
    """Means by ordinary convolution; ``cov = (1 + r_max) W^T kron(I_{k^2}, Sigma) W``."""
    _expect_channels(state, layer.in_channels, "conv input")
    layer.output_shape(state.shape)
    tau, _ = hanebeck_tau(cfg.r_max)
    means = apply_layer(layer, state.means[np.newaxis])[0]
    cov = block_quadratic(state.cov, layer.weights, tau)
    return _advance(state, means, cov, "conv")


def propagate_linear_first(state: MomentState, layer: LinearLayer) -> MomentState:
    """First fully connected layer over all pixels: ``cov = W^T kron(I_M, Sigma) W``, no inflation."""
    flat = state.pixel_count * state.channels
    if flat != layer.in_dim:
        raise ShapeError("flattened input of the first linear layer", (layer.in_dim,), (flat,))
    means = state.means.reshape(-1) @ layer.weights + layer.bias
    cov = block_quadratic(state.cov, layer.weights)
    return _advance(state, means.reshape(1, 1, -1), cov, "linear")


def propagate_linear(state: MomentState, layer: LinearLayer) -> MomentState:
    """Later fully connected layers on a single-pixel state: ``cov = W^T Sigma W``."""
    if state.pixel_count != 1:
        raise ShapeError("linear layer input (flatten first)", (1, 1, layer.in_dim), state.shape)
    _expect_channels(state, layer.in_dim, "linear input")
    means = state.means.reshape(-1) @ layer.weights + layer.bias
    cov = layer.weights.T @ state.cov @ layer.weights
    return _advance(state, means.reshape(1, 1, -1), 0.5 * (cov + cov.T), "linear")


def propagate_avgpool(state: MomentState, layer: AvgPoolLayer) -> MomentState:
    """Window-averaged means; ``cov / k^2`` with no decorrelation factor: pooled pixels count as independent."""
    layer.output_shape(state.shape)
    means = apply_layer(layer, state.means[np.newaxis])[0]
    return _advance(state, means, state.cov / layer.kernel**2, "avgpool")


def propagate_relu(state: MomentState) -> MomentState:
    """Gaussian ReLU mean per entry; the covariance passes through as its own upper bound."""
    diagonal = np.diag(state.cov)
    scale = max(1.0, float(np.max(np.abs(diagonal)))) if diagonal.size else 1.0
    if np.any(diagonal < -PSD_TOL * scale):
        raise DomainError(f"negative variance {diagonal.min():.3e} before ReLU at layer {state.layer_index}")
    means, _, _ = relu_moments(state.means, state.sigma)
    return _advance(state, means, state.cov, "relu")


def propagate_residual(trunk: MomentState, branch_out: MomentState) -> MomentState:
    """``x + branch(x)``: means add, covariances add."""
    if trunk.shape != branch_out.shape:
        raise ShapeError("residual branch output", trunk.shape, branch_out.shape)
    return MomentState(
        means=trunk.means + branch_out.means,
        cov=trunk.cov + branch_out.cov,
        layer_index=trunk.layer_index + 1,
        layer_kind="residual",
    )


def propagate_normalize(state: MomentState, layer: NormalizeLayer) -> MomentState:
    """``(mu - mu') / sigma'`` and ``Sigma / (sigma' sigma'^T)`` elementwise."""
    if not layer.enabled:
        raise ValidationFailure(f"normalize layer reached at index {state.layer_index} while disabled")
    layer.output_shape(state.shape)
    means = (state.means - layer.mu_prime) / layer.sigma_prime
    cov = state.cov / np.outer(layer.sigma_prime, layer.sigma_prime)
    return _advance(state, means, cov, "normalize")


# ---------------------------------------------------------------------------
# Whole network
# ---------------------------------------------------------------------------


def _propagate_layer(
    state: MomentState, layer: LayerSpec, cfg: BoundConfig, linear_seen: bool
) -> Tuple[MomentState, bool]:
    if isinstance(layer, ConvLayer):
        return propagate_conv(state, layer, cfg), linear_seen
    if isinstance(layer, LinearLayer):
        if linear_seen:
            return propagate_linear(state, layer), True
        return propagate_linear_first(state, layer), True
    if isinstance(layer, AvgPoolLayer):
        return propagate_avgpool(state, layer), linear_seen
    if isinstance(layer, ReLULayer):
        return propagate_relu(state), linear_seen
    if isinstance(layer, NormalizeLayer):
        if not layer.enabled:
            return _pass_through(state, "normalize"), linear_seen
        return propagate_normalize(state, layer), linear_seen
    if isinstance(layer, FlattenLayer):
        return _pass_through(state, "flatten"), linear_seen
    if isinstance(layer, ResidualLayer):
        branch = state
        for inner in layer.branch:
            branch, linear_seen = _propagate_layer(branch, inner, cfg, linear_seen)
        return propagate_residual(state, branch), linear_seen
    raise ValidationFailure(f"unsupported layer kind {type(layer).__name__}")


def propagate_layers(
    state: MomentState, layers: Sequence[LayerSpec], cfg: BoundConfig, check: bool = False
) -> Tuple[MomentState, List[MomentState]]:
    """Apply ``layers`` to ``state``; returns the final state and one state per layer.

    The first Linear in ``layers`` uses the flattening rule, so ``state`` must
    not come from a network prefix that already contained one.
    """
    trace = []
    linear_seen = False
    start = state.layer_index
    for offset, layer in enumerate(layers, start=1):
        state, linear_seen = _propagate_layer(state, layer, cfg, linear_seen)
        if state.layer_index != start + offset:
            state = state.model_copy(update={"layer_index": start + offset, "layer_kind": layer.kind})
        if check:
            state.check_invariants()
        trace.append(state)
        logger.debug("layer %d (%s): trace(cov)=%.6g", state.layer_index, layer.kind, float(np.trace(state.cov)))
    return state, trace


def propagate_all(
    net: NetworkSpec, image: np.ndarray, cfg: BoundConfig, check: bool = False
) -> Tuple[MomentState, List[MomentState]]:
    """Run every layer rule in order.

    The trace holds the input state followed by one state per top-level layer;
    a disabled normalize layer repeats its incoming state. ``check=True`` runs
    the symmetry/PSD invariant on every traced state.
    """
    image = np.asarray(image, dtype=np.float64)
    if tuple(image.shape) != tuple(net.input_shape):
        raise ShapeError("input image", net.input_shape, image.shape)
    initial = init_input(image, cfg)
    if check:
        initial.check_invariants()
    final, trace = propagate_layers(initial, net.layers, cfg, check)
    return final, [initial, *trace]


def trace_rows(trace: Sequence[MomentState]) -> List[Dict[str, Union[int, float, str]]]:
    """Per-layer summary of the shared covariance."""
    rows = []
    for state in trace:
        diagonal = np.diag(state.cov)
        rows.append(
            {
                "layer_index": state.layer_index,
                "layer_kind": state.layer_kind,
                "N": state.channels,
                "trace": float(np.sum(diagonal)),
                "min_eig": min_eigenvalue_sym(state.cov),
                "max_diag": float(np.max(diagonal)) if diagonal.size else 0.0,
            }
        )
    return rows


def write_trace_csv(rows: Sequence[Dict], path: Union[str, Path]) -> int:
    return write_csv_rows(path, CSV_COLUMNS["trace"], rows)
