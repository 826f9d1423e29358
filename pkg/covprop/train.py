"""Radius-maximizing training through the moment propagation, with hand-written reverse mode.

The forward pass here mirrors ``covprop.moments`` on raw arrays and records
what each layer rule needs on a ``GradientTape``; ``backward_all`` replays the
tape in reverse. Gradients with respect to a covariance are taken entry by
entry (``dL/dS[i, j]`` for the entry as read), so upstream grads need not be
symmetric.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from constants.common import COVPROP_THREADS, DENOMINATOR_FLOOR, PSD_TOL
from constants.datasets import CSV_COLUMNS
from covprop.certify import acr, certify_dataset, certify_image
from covprop.errors import DatasetError, DomainError, ShapeError, TrainingDivergedError, ValidationFailure
from covprop.moments import block_quadratic, hanebeck_tau, relu_moments
from covprop.network import apply_layer, col2im, forward_batch, im2col, iter_parameters, replace_parameters
from covprop.numkit import seeded_rng
from models.configs import BoundConfig, LossConfig
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
from models.results import EpochMetrics, TrainingResult
from models.training import GradientTape, Gradients, LayerRecord, RobustnessLoss, SampleLoss
from utils.csv_export import write_csv_rows

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_classification(mu_logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    """Cross-entropy on the softmax of the propagated logit means."""
    mu = np.asarray(mu_logits, dtype=np.float64).reshape(-1)
    log_probs = mu - special.logsumexp(mu)
    grad = np.exp(log_probs)
    grad[label] -= 1.0
    return float(-log_probs[label]), grad


def loss_robustness(mu_logits: np.ndarray, cov_logits: np.ndarray, label: int, cfg: LossConfig) -> RobustnessLoss:
    """Hinge ``max(0, Gamma - sigma * (mu[y] - mu[c~]) / sqrt(v))`` with ``c~`` the strongest wrong class.

    ``v = S[y, y] + S[c~, c~] - 2 S[y, c~]``. Both class indices are held fixed
    within a step. A variance at or below the floor sets ``degenerate`` and
    contributes neither value nor gradients.
    """
    mu = np.asarray(mu_logits, dtype=np.float64).reshape(-1)
    cov = np.asarray(cov_logits, dtype=np.float64)
    classes = mu.size
    if classes < 2:
        raise ValidationFailure(f"robustness loss needs at least 2 classes, got {classes}")
    others = mu.copy()
    others[label] = -np.inf
    runner_up = int(np.argmax(others))
    gap = mu[label] - mu[runner_up]
    variance = cov[label, label] + cov[runner_up, runner_up] - 2.0 * cov[label, runner_up]
    grad_mu = np.zeros(classes)
    grad_cov = np.zeros((classes, classes))
    if variance <= DENOMINATOR_FLOOR**2:
        return RobustnessLoss(
            value=0.0, grad_mu=grad_mu, grad_cov=grad_cov, runner_up=runner_up, active=False, degenerate=True
        )
    std = np.sqrt(variance)
    value = cfg.hinge_offset - cfg.sigma * gap / std
    if value <= 0.0:
        return RobustnessLoss(
            value=0.0, grad_mu=grad_mu, grad_cov=grad_cov, runner_up=runner_up, active=False, degenerate=False
        )
    grad_mu[label] = -cfg.sigma / std
    grad_mu[runner_up] = cfg.sigma / std
    grad_variance = cfg.sigma * gap / (2.0 * variance * std)
    grad_cov[label, label] += grad_variance
    grad_cov[runner_up, runner_up] += grad_variance
    grad_cov[label, runner_up] -= 2.0 * grad_variance
    return RobustnessLoss(
        value=float(value), grad_mu=grad_mu, grad_cov=grad_cov, runner_up=runner_up, active=True, degenerate=False
    )


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


def _record_layers(
    layers: Sequence[LayerSpec], means: np.ndarray, cov: np.ndarray, tape: GradientTape
) -> Tuple[np.ndarray, np.ndarray]:
    for layer in layers:
        input_shape = means.shape
        cache: Dict[str, np.ndarray] = {}
        branch: Optional[GradientTape] = None
        if isinstance(layer, ConvLayer):
            cols, (out_h, out_w) = im2col(means[np.newaxis], layer.kernel, layer.stride, layer.padding)
            cache = {"cols": cols, "cov": cov}
            means = (cols @ layer.weights + layer.bias).reshape(out_h, out_w, layer.out_channels)
            cov = block_quadratic(cov, layer.weights, tape.tau)
        elif isinstance(layer, LinearLayer):
            flat = means.reshape(-1)
            if flat.size != layer.in_dim:
                raise ShapeError("linear input size", (layer.in_dim,), (flat.size,))
            cache = {"flat": flat, "cov": cov}
            means = (flat @ layer.weights + layer.bias).reshape(1, 1, -1)
            cov = block_quadratic(cov, layer.weights)
        elif isinstance(layer, AvgPoolLayer):
            means = apply_layer(layer, means[np.newaxis])[0]
            cov = cov / layer.kernel**2
        elif isinstance(layer, ReLULayer):
            diagonal = np.diag(cov)
            if np.any(diagonal < -PSD_TOL * max(1.0, float(np.max(np.abs(diagonal))))):
                raise DomainError(f"negative variance {diagonal.min():.3e} before ReLU")
            sigma = np.sqrt(np.clip(diagonal, 0.0, None))
            means, cdf, pdf = relu_moments(means, sigma)
            cache = {"sigma": sigma, "cdf": cdf, "pdf": pdf}
        elif isinstance(layer, NormalizeLayer):
            if layer.enabled:
                means = (means - layer.mu_prime) / layer.sigma_prime
                cov = cov / np.outer(layer.sigma_prime, layer.sigma_prime)
        elif isinstance(layer, ResidualLayer):
            branch = GradientTape(tau=tape.tau)
            branch_means, branch_cov = _record_layers(layer.branch, means, cov, branch)
            means, cov = means + branch_means, cov + branch_cov
        elif not isinstance(layer, FlattenLayer):
            raise ValidationFailure(f"unsupported layer kind {type(layer).__name__}")
        tape.records.append(LayerRecord(layer=layer, input_shape=input_shape, cache=cache, branch=branch))
    return means, cov


def forward_with_tape(
    net: NetworkSpec, image: np.ndarray, bound: BoundConfig
) -> Tuple[np.ndarray, np.ndarray, GradientTape]:
    """Logit means ``(C,)``, logit covariance ``(C, C)`` and the tape that produced them."""
    image = np.asarray(image, dtype=np.float64)
    if tuple(image.shape) != tuple(net.input_shape):
        raise ShapeError("input image", net.input_shape, image.shape)
    tau, _ = hanebeck_tau(bound.r_max)
    tape = GradientTape(tau=tau)
    cov = bound.sigma_in**2 * np.eye(image.shape[2])
    means, cov = _record_layers(net.layers, image, cov, tape)
    return means.reshape(-1), cov, tape


def block_quadratic_backward(
    cov: np.ndarray, weights: np.ndarray, grad_out: np.ndarray, factor: float = 1.0
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of ``block_quadratic(cov, weights, factor)`` with respect to ``weights`` and ``cov``."""
    channels = cov.shape[0]
    out_dim = weights.shape[1]
    sym = factor * 0.5 * (grad_out + grad_out.T)
    slabs = weights.reshape(-1, channels, out_dim)
    grad_weights = np.matmul(cov + cov.T, slabs).reshape(-1, out_dim) @ sym
    grad_cov = np.einsum("pio,oq,pjq->ij", slabs, sym, slabs, optimize=True)
    return grad_weights, grad_cov


def _accumulate(grads: Gradients, key: str, value: np.ndarray) -> None:
    grads[key] = grads[key] + value if key in grads else value


def _backward_records(
    records: Sequence[LayerRecord],
    tau: float,
    prefix: str,
    grad_means: np.ndarray,
    grad_cov: np.ndarray,
    grads: Gradients,
) -> Tuple[np.ndarray, np.ndarray]:
    for position in range(len(records) - 1, -1, -1):
        record = records[position]
        layer = record.layer
        path = f"{prefix}{position}"
        if isinstance(layer, ConvLayer):
            flat_grad = grad_means.reshape(-1, layer.out_channels)
            cols = record.cache["cols"]
            grad_w_cov, grad_cov = block_quadratic_backward(record.cache["cov"], layer.weights, grad_cov, tau)
            _accumulate(grads, f"{path}.weights", cols.T @ flat_grad + grad_w_cov)
            _accumulate(grads, f"{path}.bias", flat_grad.sum(axis=0))
            grad_cols = flat_grad @ layer.weights.T
            grad_means = col2im(grad_cols, (1, *record.input_shape), layer.kernel, layer.stride, layer.padding)[0]
        elif isinstance(layer, LinearLayer):
            flat_grad = grad_means.reshape(-1)
            grad_w_cov, grad_cov = block_quadratic_backward(record.cache["cov"], layer.weights, grad_cov)
            _accumulate(grads, f"{path}.weights", np.outer(record.cache["flat"], flat_grad) + grad_w_cov)
            _accumulate(grads, f"{path}.bias", flat_grad)
            grad_means = (layer.weights @ flat_grad).reshape(record.input_shape)
        elif isinstance(layer, AvgPoolLayer):
            k = layer.kernel
            grad_means = np.repeat(np.repeat(grad_means, k, axis=0), k, axis=1) / k**2
            grad_cov = grad_cov / k**2
        elif isinstance(layer, ReLULayer):
            sigma = record.cache["sigma"]
            grad_sigma = (grad_means * record.cache["pdf"]).sum(axis=(0, 1))
            grad_means = grad_means * record.cache["cdf"]
            positive = sigma > 0.0
            grad_cov = grad_cov.copy()
            grad_cov[np.diag_indices_from(grad_cov)] += np.where(
                positive, grad_sigma / (2.0 * np.where(positive, sigma, 1.0)), 0.0
            )
        elif isinstance(layer, NormalizeLayer):
            if layer.enabled:
                grad_means = grad_means / layer.sigma_prime
                grad_cov = grad_cov / np.outer(layer.sigma_prime, layer.sigma_prime)
        elif isinstance(layer, ResidualLayer):
            branch_means, branch_cov = _backward_records(
                record.branch.records, tau, f"{path}.branch.", grad_means, grad_cov, grads
            )
            grad_means, grad_cov = grad_means + branch_means, grad_cov + branch_cov
    return grad_means, grad_cov


def _check_tape(layers: Sequence[LayerSpec], tape: GradientTape) -> None:
    if len(layers) != len(tape.records):
        raise ValidationFailure(f"tape holds {len(tape.records)} layers, network has {len(layers)}")
    for index, (layer, record) in enumerate(zip(layers, tape.records)):
        if record.layer is not layer:
            raise ValidationFailure(f"tape layer {index} ({record.layer.kind}) was not recorded from this network")
        if isinstance(layer, ResidualLayer):
            _check_tape(layer.branch, record.branch)


def backward_all(net: NetworkSpec, tape: GradientTape, grad_mu: np.ndarray, grad_cov: np.ndarray) -> Gradients:
    """Parameter gradients, keyed like ``iter_parameters``, for upstream logit gradients ``(grad_mu, grad_cov)``."""
    _check_tape(net.layers, tape)
    grads: Gradients = {}
    grad_means = np.asarray(grad_mu, dtype=np.float64).reshape(1, 1, -1)
    _backward_records(tape.records, tape.tau, "", grad_means, np.asarray(grad_cov, dtype=np.float64), grads)
    for name, value in iter_parameters(net):
        grads.setdefault(name, np.zeros_like(value))
    return grads


def total_loss(
    net: NetworkSpec,
    image: np.ndarray,
    label: int,
    cfg: LossConfig,
    lam: float,
    classification_weight: float = 1.0,
    robust_label: Optional[int] = None,
) -> SampleLoss:
    """``classification_weight * l_C + lam * l_CR`` and its parameter gradients for one sample.

    ``robust_label`` replaces the label inside the robustness term (the
    noisy-label fine-tuning uses the predicted class there).
    """
    mu, cov, tape = forward_with_tape(net, image, cfg.bound)
    loss_c, grad_mu = loss_classification(mu, label)
    grad_mu = classification_weight * grad_mu
    grad_cov = np.zeros_like(cov)
    loss_cr = 0.0
    degenerate = False
    if lam > 0.0:
        robust = loss_robustness(mu, cov, label if robust_label is None else robust_label, cfg)
        loss_cr = robust.value
        degenerate = robust.degenerate
        grad_mu = grad_mu + lam * robust.grad_mu
        grad_cov = lam * robust.grad_cov
    grads = backward_all(net, tape, grad_mu, grad_cov)
    total = classification_weight * loss_c + lam * loss_cr
    return SampleLoss(total=total, loss_c=loss_c, loss_cr=loss_cr, grads=grads, degenerate=degenerate)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def _check_dataset(images: np.ndarray, labels: np.ndarray, net: NetworkSpec) -> None:
    if len(images) == 0:
        raise DatasetError("training needs a non-empty dataset")
    if len(images) != len(labels):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    if tuple(images.shape[1:]) != tuple(net.input_shape):
        raise ShapeError("training images", (-1, *net.input_shape), images.shape)
    if labels.min() < 0 or labels.max() >= net.class_count:
        raise DatasetError(f"labels must lie in [0, {net.class_count}), got [{labels.min()}, {labels.max()}]")


def evaluate(
    net: NetworkSpec, images: np.ndarray, labels: np.ndarray, bound: BoundConfig, threads: Optional[int] = None
) -> Tuple[float, float]:
    """Clean accuracy of the base classifier and ACR of the propagated certificate."""
    clean_acc = float(np.mean(np.argmax(forward_batch(net, images), axis=1) == labels))
    rows = certify_dataset(net, images, labels, bound, threads)
    return clean_acc, acr([(row, row.true_label) for row in rows])


def _run_epochs(
    net: NetworkSpec,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
    seed: int,
    threads: Optional[int],
    sample_plan,
) -> TrainingResult:
    """SGD with momentum; ``sample_plan(net, epoch)`` gives per-sample (class weight, robust label)."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_dataset(images, labels, net)
    workers = max(1, threads or COVPROP_THREADS)
    params = {name: np.array(value) for name, value in iter_parameters(net)}
    velocity = {name: np.zeros_like(value) for name, value in params.items()}
    metrics: List[EpochMetrics] = []

    with ThreadPoolExecutor(max_workers=workers) as pool:
        for epoch in range(cfg.epochs):
            lr = cfg.learning_rate(epoch)
            lam = cfg.robustness_weight(epoch)
            weights, robust_labels = sample_plan(net, epoch)
            order = seeded_rng(seed, epoch).permutation(len(images))
            loss_c_sum = loss_cr_sum = 0.0
            degenerate = 0
            for batch_index, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = order[start : start + cfg.batch_size]

                def sample_loss(index: int, current: NetworkSpec = net) -> SampleLoss:
                    return total_loss(
                        current, images[index], int(labels[index]), cfg, lam, weights[index], robust_labels[index]
                    )

                losses = list(pool.map(sample_loss, batch))
                batch_total = sum(item.total for item in losses)
                if not np.isfinite(batch_total):
                    raise TrainingDivergedError(epoch, batch_index, f"batch loss {batch_total}")
                for name in params:
                    grad = sum(item.grads[name] for item in losses) / len(losses)
                    velocity[name] = cfg.momentum * velocity[name] + grad
                    params[name] = params[name] - lr * velocity[name]
                    if not np.all(np.isfinite(params[name])):
                        raise TrainingDivergedError(epoch, batch_index, f"parameter {name} became non-finite")
                net = replace_parameters(net, params)
                loss_c_sum += sum(item.loss_c for item in losses)
                loss_cr_sum += sum(item.loss_cr for item in losses)
                degenerate += sum(item.degenerate for item in losses)

            if degenerate:
                logger.warning("epoch %d: %d samples had a degenerate logit-difference variance", epoch, degenerate)
            clean_acc, epoch_acr = evaluate(net, images, labels, cfg.bound, workers)
            row = EpochMetrics(
                epoch=epoch,
                clean_acc=clean_acc,
                acr=epoch_acr,
                mean_loss_c=loss_c_sum / len(images),
                mean_loss_cr=loss_cr_sum / len(images),
            )
            metrics.append(row)
            logger.info(
                "epoch %d lr=%.4g lambda=%.3g: clean_acc=%.3f acr=%.4f l_C=%.4f l_CR=%.4f",
                epoch, lr, lam, row.clean_acc, row.acr, row.mean_loss_c, row.mean_loss_cr,
            )
    return TrainingResult(network=net, metrics=metrics)


def train_loop(
    net: NetworkSpec, images: np.ndarray, labels: np.ndarray, cfg: LossConfig, seed: int, threads: Optional[int] = None
) -> TrainingResult:
    """Two-phase training: classification only until ``lambda_activation_epoch``, then ``l_C + lambda * l_CR``."""
    count = len(images)

    def plan(_: NetworkSpec, __: int) -> Tuple[np.ndarray, List[Optional[int]]]:
        return np.ones(count), [None] * count

    return _run_epochs(net, images, labels, cfg, seed, threads, plan)


def top_radius_indices(net: NetworkSpec, images: np.ndarray, bound: BoundConfig, fraction: float) -> np.ndarray:
    """Indices of the ``fraction`` of samples with the largest propagated radius (ties to lower index)."""
    radii = np.array([certify_image(net, image, bound).radius for image in images])
    keep = int(round(fraction * len(images)))
    order = np.argsort(-radii, kind="stable")
    return np.sort(order[:keep])


def noisy_label_finetune(
    net: NetworkSpec,
    images: np.ndarray,
    noisy_labels: np.ndarray,
    cfg: LossConfig,
    seed: int,
    threads: Optional[int] = None,
) -> TrainingResult:
    """Fine-tune a warm-started network on noisy labels.

    Every epoch re-ranks the samples by propagated radius; the top
    ``cfg.top_fraction`` keep only the robustness term, taken around their
    predicted class instead of the (possibly flipped) label.
    """
    images = np.asarray(images, dtype=np.float64)
    count = len(images)

    def plan(current: NetworkSpec, epoch: int) -> Tuple[np.ndarray, List[Optional[int]]]:
        confident = top_radius_indices(current, images, cfg.bound, cfg.top_fraction)
        weights = np.ones(count)
        robust_labels: List[Optional[int]] = [None] * count
        if len(confident):
            predictions = np.argmax(forward_batch(current, images[confident]), axis=1)
            for index, predicted in zip(confident, predictions):
                weights[index] = 0.0
                robust_labels[index] = int(predicted)
        logger.debug("epoch %d: classification loss dropped for %d samples", epoch, len(confident))
        return weights, robust_labels

    return _run_epochs(net, images, noisy_labels, cfg, seed, threads, plan)


def write_metrics_csv(metrics: Sequence[EpochMetrics], path: Union[str, Path]) -> int:
    return write_csv_rows(path, CSV_COLUMNS["metrics"], (row.model_dump() for row in metrics))
