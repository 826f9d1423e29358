"""From final-layer moments to a certified radius, plus the dataset-level metrics."""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from constants.common import COVPROP_THREADS, DENOMINATOR_FLOOR, RADIUS_GRID
from constants.datasets import CSV_COLUMNS
from covprop.errors import DatasetError, ShapeError, ValidationFailure
from covprop.moments import block_quadratic, init_input, propagate_all, propagate_layers
from covprop.numkit import std_normal_cdf
from models.configs import BoundConfig
from models.network import LinearLayer, NetworkSpec
from models.results import CertificationRow, CertResult
from models.states import MomentState
from utils.csv_export import write_csv_rows

logger = logging.getLogger(__name__)


def top_two(mu: np.ndarray) -> Tuple[int, int]:
    """Best and second-best class; ties resolve to the lowest index."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    if mu.size < 2:
        raise ValidationFailure(f"certification needs at least 2 classes, got {mu.size}")
    predicted = int(np.argmax(mu))
    rest = mu.copy()
    rest[predicted] = -np.inf
    return predicted, int(np.argmax(rest))


def margin_z(mu: np.ndarray, cov: np.ndarray, first: int, second: int) -> float:
    """``(mu[a] - mu[b]) / sqrt(S[a,a] + S[b,b] - 2 S[a,b])`` with the denominator floored."""
    variance = cov[first, first] + cov[second, second] - 2.0 * cov[first, second]
    denominator = max(float(np.sqrt(max(variance, 0.0))), DENOMINATOR_FLOOR)
    return float((mu[first] - mu[second]) / denominator)


def lower_prob(mu: np.ndarray, cov: np.ndarray) -> Tuple[int, int, float]:
    """``(c_x, c~, Phi(z))`` for the logit distribution ``N(mu, cov)``."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (mu.size, mu.size):
        raise ShapeError("logit covariance", (mu.size, mu.size), cov.shape)
    predicted, runner_up = top_two(mu)
    return predicted, runner_up, float(std_normal_cdf(margin_z(mu, cov, predicted, runner_up)))


def _result(predicted: int, runner_up: int, z: float, sigma_in: float) -> CertResult:
    return CertResult(
        predicted=predicted,
        runner_up=runner_up,
        p_lower=float(std_normal_cdf(z)),
        radius=max(0.0, sigma_in * z),
        margin_z=z,
    )


def certified_radius(mu: np.ndarray, cov: np.ndarray, sigma_in: float) -> CertResult:
    """Closed-form radius ``sigma * z``; no Phi / Phi^-1 round trip."""
    if sigma_in <= 0:
        raise ValidationFailure(f"certification needs sigma_in > 0, got {sigma_in}")
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (mu.size, mu.size):
        raise ShapeError("logit covariance", (mu.size, mu.size), cov.shape)
    predicted, runner_up = top_two(mu)
    return _result(predicted, runner_up, margin_z(mu, cov, predicted, runner_up), sigma_in)


def last_layer_2x2(state_before_final: MomentState, final: LinearLayer, sigma_in: float) -> CertResult:
    """Certify through the only Linear layer while forming just the 2x2 covariance of the top two logits."""
    if not isinstance(final, LinearLayer):
        raise ValidationFailure(f"2x2 shortcut needs a Linear final layer, got {type(final).__name__}")
    if sigma_in <= 0:
        raise ValidationFailure(f"certification needs sigma_in > 0, got {sigma_in}")
    flat = state_before_final.pixel_count * state_before_final.channels
    if flat != final.in_dim:
        raise ShapeError("flattened input of the final linear layer", (final.in_dim,), (flat,))
    mu = state_before_final.means.reshape(-1) @ final.weights + final.bias
    predicted, runner_up = top_two(mu)
    columns = final.weights[:, [predicted, runner_up]]
    cov2 = block_quadratic(state_before_final.cov, columns)
    z = margin_z(mu[[predicted, runner_up]], cov2, 0, 1)
    return _result(predicted, runner_up, z, sigma_in)


def acr(results: Sequence[Tuple[Union[CertResult, CertificationRow], int]]) -> float:
    """Average certified radius; misclassified samples contribute 0."""
    if not results:
        raise ValidationFailure("ACR of an empty result list is undefined")
    total = sum(result.radius for result, label in results if result.predicted == label)
    return float(total / len(results))


def certify_image(net: NetworkSpec, image: np.ndarray, cfg: BoundConfig) -> CertResult:
    """Propagate and certify one image, using the 2x2 shortcut when the head is the only Linear layer."""
    if net.linear_count == 1:
        image = np.asarray(image, dtype=np.float64)
        if tuple(image.shape) != tuple(net.input_shape):
            raise ShapeError("input image", net.input_shape, image.shape)
        before_final, _ = propagate_layers(init_input(image, cfg), net.layers[:-1], cfg)
        return last_layer_2x2(before_final, net.layers[-1], cfg.sigma_in)
    final, _ = propagate_all(net, image, cfg)
    return certified_radius(final.means.reshape(-1), final.cov, cfg.sigma_in)


def certify_dataset(
    net: NetworkSpec,
    images: np.ndarray,
    labels: Sequence[int],
    cfg: BoundConfig,
    threads: Optional[int] = None,
) -> List[CertificationRow]:
    """One row per sample in index order; the radius is zeroed for misclassified samples."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise DatasetError("cannot certify an empty dataset")
    if len(images) != len(labels):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    workers = max(1, threads or COVPROP_THREADS)

    def certify_one(index: int) -> CertificationRow:
        result = certify_image(net, images[index], cfg)
        label = int(labels[index])
        return CertificationRow(
            sample_id=index,
            true_label=label,
            predicted=result.predicted,
            p_lower=result.p_lower,
            radius=result.radius if result.predicted == label else 0.0,
        )

    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(certify_one, range(len(images))))
    logger.info("Certified %d samples with %d worker(s)", len(rows), workers)
    return rows


def certified_accuracy(
    rows: Sequence[CertificationRow], thresholds: Sequence[float] = RADIUS_GRID
) -> Dict[float, float]:
    """Fraction of samples that are correct with radius >= r, for each threshold r."""
    if not rows:
        raise ValidationFailure("certified accuracy of an empty table is undefined")
    return {
        float(r): sum(1 for row in rows if row.correct and row.radius >= r) / len(rows) for r in thresholds
    }


def format_summary(rows: Sequence[CertificationRow], thresholds: Sequence[float] = RADIUS_GRID) -> str:
    """``"0.00: 0.50, 0.25: 0.50, ...; ACR: 0.150"``."""
    accuracy = certified_accuracy(rows, thresholds)
    grid = ", ".join(f"{r:.2f}: {value:.2f}" for r, value in accuracy.items())
    return f"{grid}; ACR: {acr([(row, row.true_label) for row in rows]):.3f}"


def write_certification_csv(rows: Sequence[CertificationRow], path: Union[str, Path]) -> int:
    return write_csv_rows(path, CSV_COLUMNS["certify"], (row.model_dump() for row in rows))
