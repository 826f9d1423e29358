"""Bookkeeping cost of tracking cross-pixel correlations explicitly.

A 1-D convolution stack with kernel ``k`` is traced back from a single
output pixel. ``j`` layers back, the pixels feeding it need one covariance
``Sigma`` each and one cross-correlation ``E`` per unordered pair (self
pairs included):

* without overlap the receptive field is ``k**j`` pixels,
* with overlap (stride 1) it is ``(k - 1) * j + 1`` pixels.

The output layer itself needs a single ``Sigma`` and no ``E``.
"""

import logging
from pathlib import Path
from typing import List, Sequence, Union

from constants.datasets import CSV_COLUMNS
from covprop.errors import ValidationFailure
from models.results import BookkeepingRow, MemoryFootprint
from utils.csv_export import write_csv_rows

logger = logging.getLogger(__name__)


def receptive_pixels(k: int, j: int, mode: str) -> int:
    if mode == "no-overlap":
        return k**j
    if mode == "overlap":
        return (k - 1) * j + 1
    raise ValidationFailure(f"mode must be 'overlap' or 'no-overlap', got {mode!r}")


def bookkeeping_counts(k: int, q: int, mode: str) -> List[BookkeepingRow]:
    """Rows for ``j = 0..q`` layers back from the output."""
    if k < 2:
        raise ValidationFailure(f"kernel size must be >= 2, got {k}")
    if q < 0:
        raise ValidationFailure(f"depth must be >= 0, got {q}")
    rows = []
    for j in range(q + 1):
        pixels = receptive_pixels(k, j, mode)
        cross = 0 if j == 0 else (pixels + 1) * pixels // 2
        rows.append(BookkeepingRow(layers_back=j, sigma_count=pixels, cross_count=cross))
    deepest = rows[-1]
    logger.debug("k=%d q=%d %s: %d Sigma, %d E at depth %d", k, q, mode, deepest.sigma_count, deepest.cross_count, q)
    return rows


def memory_footprint(height: int, width: int, channels: int) -> MemoryFootprint:
    """Stored values per layer, from plain activations up to every pairwise correlation.

    ``shared_covariance`` counts the means plus one ``C x C`` channel covariance.
    """
    activations = height * width * channels
    squared = activations * activations
    brute_force = squared // 2 if squared % 2 == 0 else squared / 2
    return MemoryFootprint(
        height=height,
        width=width,
        channels=channels,
        traditional=activations,
        brute_force=brute_force,
        shared_covariance=activations + channels * channels,
    )


def format_cost_table(rows: Sequence[BookkeepingRow]) -> str:
    lines = [f"{'layers back':>11}  {'Sigma':>12}  {'E':>16}"]
    lines += [f"{row.layers_back:>11}  {row.sigma_count:>12}  {row.cross_count:>16}" for row in rows]
    return "\n".join(lines)


def write_cost_csv(rows: Sequence[Union[BookkeepingRow, MemoryFootprint]], path: Union[str, Path]) -> int:
    kind = "memory" if rows and isinstance(rows[0], MemoryFootprint) else "cost"
    return write_csv_rows(path, CSV_COLUMNS[kind], (row.model_dump() for row in rows))
