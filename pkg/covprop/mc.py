"""Monte Carlo randomized smoothing: the sampling certifier and the empirical layer statistics.

Noise is drawn in chunks of ``batch_size`` forwards. Chunk ``j`` of stream
``s`` for sample ``i`` always comes from ``seeded_rng(seed, i, s, j)``, and
partial results are reduced in chunk order, so a run is bit-reproducible for
any worker count.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from constants.common import (
    COVPROP_THREADS,
    CROSSCHECK_TOLERANCE,
    DEFAULT_R_MAX,
    MAX_TRACKED_CHANNELS,
    MC_BATCH_SIZE,
    MIN_LAYER_SAMPLES,
)
from constants.datasets import CSV_COLUMNS
from covprop.certify import certify_image
from covprop.errors import ShapeError, ValidationFailure
from covprop.moments import propagate_all
from covprop.network import forward_batch, forward_trace
from covprop.numkit import binom_lower_confidence, seeded_rng, std_normal_cdf_inv
from models.configs import BoundConfig, MCConfig
from models.network import NetworkSpec, ReLULayer
from models.results import ABSTAIN, CrosscheckReport, CrosscheckRow, GaussianityExport, LayerMoments, MCReport
from utils.csv_export import write_csv_rows

logger = logging.getLogger(__name__)

SELECTION_STREAM = 0
ESTIMATION_STREAM = 1
MOMENT_STREAM = 2
SCATTER_STREAM = 3

# same-channel neighbour offsets scanned for the cross-pixel correlation diagnostic
NEIGHBOUR_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))

T = TypeVar("T")
_Window = Tuple[slice, slice]


def _chunk_sizes(total: int, batch_size: int) -> List[int]:
    full, rest = divmod(total, batch_size)
    return [batch_size] * full + ([rest] if rest else [])


def noisy_batch(
    image: np.ndarray, sigma: float, size: int, seed: int, sample_id: int, stream: int, chunk: int
) -> np.ndarray:
    rng = seeded_rng(seed, sample_id, stream, chunk)
    return image[np.newaxis] + sigma * rng.standard_normal((size, *image.shape))


def _map_chunks(work: Callable[[int, int], T], total: int, batch_size: int, threads: Optional[int]) -> Iterator[T]:
    """Evaluate ``work(chunk, size)`` over all chunks; yields results in chunk order."""
    sizes = _chunk_sizes(total, batch_size)
    workers = max(1, threads or COVPROP_THREADS)
    if workers == 1:
        for chunk, size in enumerate(sizes):
            yield work(chunk, size)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(work, range(len(sizes)), sizes)


def sample_counts(
    net: NetworkSpec,
    image: np.ndarray,
    sigma: float,
    count: int,
    seed: int,
    stream: int,
    sample_id: int = 0,
    batch_size: int = MC_BATCH_SIZE,
    threads: Optional[int] = None,
) -> np.ndarray:
    """Histogram of base-classifier predictions over ``count`` noisy copies of ``image``."""
    image = np.asarray(image, dtype=np.float64)

    def count_chunk(chunk: int, size: int) -> np.ndarray:
        logits = forward_batch(net, noisy_batch(image, sigma, size, seed, sample_id, stream, chunk))
        return np.bincount(np.argmax(logits, axis=1), minlength=net.class_count)

    counts = np.zeros(net.class_count, dtype=np.int64)
    for partial in _map_chunks(count_chunk, count, batch_size, threads):
        counts += partial
    return counts


def mc_predict(net: NetworkSpec, image: np.ndarray, cfg: MCConfig, sample_id: int = 0) -> int:
    """Top class among ``n0`` noisy forwards, or ``ABSTAIN`` when the two best counts tie."""
    counts = sample_counts(net, image, cfg.sigma, cfg.n0, cfg.seed, SELECTION_STREAM, sample_id, cfg.batch_size)
    order = np.argsort(-counts, kind="stable")
    if counts.size > 1 and counts[order[0]] == counts[order[1]]:
        return ABSTAIN
    return int(order[0])


def mc_certify(net: NetworkSpec, image: np.ndarray, cfg: MCConfig, sample_id: int = 0) -> MCReport:
    """Select with ``n0`` draws, estimate with ``n`` fresh draws, certify ``sigma * Phi^-1(p_lower)``."""
    selection = sample_counts(net, image, cfg.sigma, cfg.n0, cfg.seed, SELECTION_STREAM, sample_id, cfg.batch_size)
    chosen = int(np.argmax(selection))
    counts = sample_counts(net, image, cfg.sigma, cfg.n, cfg.seed, ESTIMATION_STREAM, sample_id, cfg.batch_size)
    p_lower = binom_lower_confidence(int(counts[chosen]), cfg.n, cfg.alpha)
    class_counts = [int(value) for value in counts]
    if p_lower <= 0.5:
        logger.debug("sample %d abstains: p_lower=%.4f for class %d", sample_id, p_lower, chosen)
        return MCReport(
            predicted=ABSTAIN, class_counts=class_counts, n_samples=cfg.n, p_lower=p_lower, radius=0.0, abstained=True
        )
    radius = cfg.sigma * float(std_normal_cdf_inv(p_lower))
    return MCReport(
        predicted=chosen, class_counts=class_counts, n_samples=cfg.n, p_lower=p_lower, radius=radius, abstained=False
    )


def mc_acr(net: NetworkSpec, images: np.ndarray, labels: Sequence[int], cfg: MCConfig) -> float:
    """ACR of the smoothed classifier; abstentions and wrong predictions count 0."""
    if len(images) == 0:
        raise ValidationFailure("ACR of an empty dataset is undefined")
    total = 0.0
    for index, (image, label) in enumerate(zip(np.asarray(images, dtype=np.float64), labels)):
        report = mc_certify(net, image, cfg, sample_id=index)
        if report.predicted == int(label):
            total += report.radius
    return total / len(images)


# ---------------------------------------------------------------------------
# Empirical layer statistics
# ---------------------------------------------------------------------------


def _offset_slices(height: int, width: int, dy: int, dx: int) -> Optional[Tuple[_Window, _Window]]:
    if dy >= height or abs(dx) >= width:
        return None
    rows_a, rows_b = slice(0, height - dy), slice(dy, height)
    if dx >= 0:
        cols_a, cols_b = slice(0, width - dx), slice(dx, width)
    else:
        cols_a, cols_b = slice(-dx, width), slice(0, width + dx)
    return (rows_a, cols_a), (rows_b, cols_b)


def _layer_partials(x: np.ndarray) -> Dict[str, np.ndarray]:
    partial = {
        "sum": x.sum(axis=0),
        "square": (x * x).sum(axis=0),
        "outer": np.einsum("bhwi,bhwj->ij", x, x),
    }
    _, height, width, _ = x.shape
    for dy, dx in NEIGHBOUR_OFFSETS:
        slices = _offset_slices(height, width, dy, dx)
        if slices is not None:
            (ra, ca), (rb, cb) = slices
            partial[f"cross_{dy}_{dx}"] = (x[:, ra, ca, :] * x[:, rb, cb, :]).sum(axis=0)
    return partial


def _max_cross_corr(totals: Dict[str, np.ndarray], mean_grid: np.ndarray, variance: np.ndarray, n: int) -> float:
    height, width, _ = mean_grid.shape
    best = 0.0
    for dy, dx in NEIGHBOUR_OFFSETS:
        slices = _offset_slices(height, width, dy, dx)
        if slices is None:
            continue
        (ra, ca), (rb, cb) = slices
        covariance = (totals[f"cross_{dy}_{dx}"] - n * mean_grid[ra, ca] * mean_grid[rb, cb]) / (n - 1)
        scale = np.sqrt(variance[ra, ca] * variance[rb, cb])
        valid = scale > 1e-12 * float(np.max(scale)) if scale.size else scale > 0
        if np.any(valid):
            best = max(best, float(np.max(np.abs(covariance[valid] / scale[valid]))))
    return min(best, 1.0)


def mc_layer_moments(
    net: NetworkSpec,
    image: np.ndarray,
    sigma: float,
    n: int,
    seed: int,
    layers: Optional[Sequence[int]] = None,
    batch_size: int = MC_BATCH_SIZE,
    threads: Optional[int] = None,
) -> List[LayerMoments]:
    """Empirical mean grid, pooled channel covariance and max neighbour correlation per layer.

    ``layers`` are trace indices (0 is the input, ``i`` the output of top-level
    layer ``i``); all of them by default. The pooled covariance averages the
    per-pixel covariances, each taken around its own pixel mean.
    """
    if n < MIN_LAYER_SAMPLES:
        raise ValidationFailure(f"empirical layer moments need n >= {MIN_LAYER_SAMPLES}, got {n}")
    image = np.asarray(image, dtype=np.float64)
    shapes = net.shapes
    picked = list(range(len(shapes))) if layers is None else sorted(set(layers))
    for index in picked:
        if not 0 <= index < len(shapes):
            raise ValidationFailure(f"layer index {index} outside 0..{len(shapes) - 1}")
        if shapes[index][2] > MAX_TRACKED_CHANNELS:
            raise ValidationFailure(
                f"layer {index} has {shapes[index][2]} channels, above the {MAX_TRACKED_CHANNELS} tracked at most"
            )

    def chunk_partials(chunk: int, size: int) -> List[Dict[str, np.ndarray]]:
        outputs = forward_trace(net, noisy_batch(image, sigma, size, seed, 0, MOMENT_STREAM, chunk))
        return [_layer_partials(outputs[index]) for index in picked]

    totals: Optional[List[Dict[str, np.ndarray]]] = None
    for partials in _map_chunks(chunk_partials, n, batch_size, threads):
        if totals is None:
            totals = partials
        else:
            for total, partial in zip(totals, partials):
                for key, value in partial.items():
                    total[key] = total[key] + value

    results = []
    for index, total in zip(picked, totals):
        height, width, _ = shapes[index]
        mean_grid = total["sum"] / n
        pixel_outer = np.einsum("hwi,hwj->ij", mean_grid, mean_grid)
        cov = (total["outer"] - n * pixel_outer) / ((height * width) * (n - 1))
        variance = np.clip((total["square"] - n * mean_grid**2) / (n - 1), 0.0, None)
        kind = "input" if index == 0 else net.layers[index - 1].kind
        feeds_relu = index < len(net.layers) and isinstance(net.layers[index], ReLULayer)
        results.append(
            LayerMoments(
                layer_index=index,
                layer_kind=kind,
                n_samples=n,
                mean_grid=mean_grid,
                cov=0.5 * (cov + cov.T),
                max_cross_corr=_max_cross_corr(total, mean_grid, variance, n),
                pre_activation=feeds_relu,
            )
        )
    logger.info("Collected empirical moments for %d layers from %d samples", len(results), n)
    return results


def empirical_gaussianity(
    net: NetworkSpec,
    image: np.ndarray,
    sigma: float,
    n: int,
    layer: int,
    channel_pair: Tuple[int, int],
    seed: int = 0,
    r_max: float = DEFAULT_R_MAX,
    pixel: Optional[Tuple[int, int]] = None,
    batch_size: int = MC_BATCH_SIZE,
) -> GaussianityExport:
    """Sampled values of two channels at one pixel of ``layer`` plus the propagated 2x2 ellipse.

    The pixel defaults to the centre of the layer's grid.
    """
    shapes = net.shapes
    if not 0 <= layer < len(shapes):
        raise ValidationFailure(f"layer index {layer} outside 0..{len(shapes) - 1}")
    height, width, channels = shapes[layer]
    first, second = channel_pair
    if first == second or not (0 <= first < channels and 0 <= second < channels):
        raise ValidationFailure(f"channel pair {channel_pair} invalid for a layer with {channels} channels")
    row, col = pixel if pixel is not None else (height // 2, width // 2)
    if not (0 <= row < height and 0 <= col < width):
        raise ShapeError("probed pixel", (height, width), (row, col))
    image = np.asarray(image, dtype=np.float64)

    pieces = []
    for chunk, size in enumerate(_chunk_sizes(n, batch_size)):
        outputs = forward_trace(net, noisy_batch(image, sigma, size, seed, 0, SCATTER_STREAM, chunk))
        pieces.append(outputs[layer][:, row, col, [first, second]])
    samples = np.concatenate(pieces, axis=0) if pieces else np.zeros((0, 2))

    _, trace = propagate_all(net, image, BoundConfig(r_max=r_max, sigma_in=sigma))
    state = trace[layer]
    pair = [first, second]
    cov2 = state.cov[np.ix_(pair, pair)]
    eigenvalues, eigenvectors = np.linalg.eigh(cov2)
    major = eigenvectors[:, 1]
    return GaussianityExport(
        layer_index=layer,
        pixel=(row, col),
        channels=(first, second),
        samples=samples,
        center=state.means[row, col, pair],
        propagated_cov=cov2,
        semi_major=float(math.sqrt(max(eigenvalues[1], 0.0))),
        semi_minor=float(math.sqrt(max(eigenvalues[0], 0.0))),
        angle=float(math.atan2(major[1], major[0])),
    )


# ---------------------------------------------------------------------------
# Propagated vs sampled radii
# ---------------------------------------------------------------------------


def radius_cap(cfg: MCConfig) -> float:
    """Largest radius the sampler can certify: all ``n`` draws successful."""
    return cfg.sigma * float(std_normal_cdf_inv(cfg.alpha ** (1.0 / cfg.n)))


def validity_crosscheck(
    net: NetworkSpec,
    images: np.ndarray,
    mc_cfg: MCConfig,
    bound_cfg: BoundConfig,
    tolerance: float = CROSSCHECK_TOLERANCE,
) -> CrosscheckReport:
    """Compare the propagated radius against the sampled one on every image.

    A sample is eligible when the sampler does not abstain and the propagated
    radius stays below the sampler's cap. It passes when both pick the same
    class and ``R_mc >= R_prop - tolerance * sigma``, or when ``R_prop`` is
    itself within the tolerance.
    """
    cap = radius_cap(mc_cfg)
    slack = tolerance * mc_cfg.sigma
    rows = []
    for index, image in enumerate(np.asarray(images, dtype=np.float64)):
        propagated = certify_image(net, image, bound_cfg)
        report = mc_certify(net, image, mc_cfg, sample_id=index)
        eligible = not report.abstained and propagated.radius < cap
        agrees = report.predicted == propagated.predicted and report.radius >= propagated.radius - slack
        rows.append(
            CrosscheckRow(
                sample_id=index,
                predicted=propagated.predicted,
                prop_radius=propagated.radius,
                mc_radius=report.radius,
                abstained=report.abstained,
                eligible=eligible,
                within_tolerance=agrees or propagated.radius <= slack,
            )
        )
    result = CrosscheckReport(rows=rows, tolerance=slack, radius_cap=cap)
    if result.pass_fraction is None:
        logger.warning("Validity cross-check: no eligible samples among %d, nothing checked", len(rows))
        return result
    logger.info(
        "Validity cross-check: %.1f%% of %d eligible samples within %.4f",
        100 * result.pass_fraction,
        result.eligible_count,
        slack,
    )
    return result


# ---------------------------------------------------------------------------
# CSV exporters
# ---------------------------------------------------------------------------


def write_mc_certification_csv(
    reports: Sequence[MCReport], labels: Sequence[int], path: Union[str, Path]
) -> int:
    rows = (
        {
            "sample_id": index,
            "true_label": int(label),
            "predicted": report.predicted,
            "p_lower": report.p_lower,
            "radius": report.radius,
            "abstained": report.abstained,
        }
        for index, (report, label) in enumerate(zip(reports, labels))
    )
    return write_csv_rows(path, CSV_COLUMNS["mc_certify"], rows)


def write_layer_moments_csv(moments: Sequence[LayerMoments], path: Union[str, Path]) -> int:
    rows = (
        {
            "layer_index": item.layer_index,
            "layer_kind": item.layer_kind,
            "N": item.cov.shape[0],
            "mean_variance": item.mean_variance,
            "max_cross_corr": item.max_cross_corr,
            "pre_activation": item.pre_activation,
        }
        for item in moments
    )
    return write_csv_rows(path, CSV_COLUMNS["layer_moments"], rows)


def write_gaussianity_csv(export: GaussianityExport, path: Union[str, Path]) -> Path:
    """Samples go to ``path``; the ellipse parameters to ``<stem>_ellipse.csv`` beside it."""
    path = Path(path)
    write_csv_rows(
        path,
        CSV_COLUMNS["gaussianity"],
        ({"sample": i, "channel_a": float(a), "channel_b": float(b)} for i, (a, b) in enumerate(export.samples)),
    )
    ellipse_path = path.with_name(f"{path.stem}_ellipse.csv")
    write_csv_rows(
        ellipse_path,
        CSV_COLUMNS["ellipse"],
        [
            {
                "center_a": float(export.center[0]),
                "center_b": float(export.center[1]),
                "semi_major": export.semi_major,
                "semi_minor": export.semi_minor,
                "angle": export.angle,
            }
        ],
    )
    return ellipse_path


def write_crosscheck_csv(report: CrosscheckReport, path: Union[str, Path]) -> int:
    return write_csv_rows(path, CSV_COLUMNS["crosscheck"], (row.model_dump() for row in report.rows))
