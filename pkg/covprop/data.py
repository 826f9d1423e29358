"""Datasets: the seeded toy set, pair-flip label noise, ``.npz`` storage and the optional MNIST fetcher."""

import gzip
import logging
import struct
import zipfile
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import requests

from constants.common import TOY_CLASS_COUNT, TOY_IMAGE_SIZE, TOY_PIXEL_NOISE, TOY_SAMPLE_COUNT
from constants.datasets import IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, MNIST_BASE_URL, MNIST_FILES, MNIST_SHAPE
from covprop.errors import DatasetError, ValidationFailure
from covprop.numkit import seeded_rng
from utils.app_helpers import retry_with_backoff

logger = logging.getLogger(__name__)

Dataset = Tuple[np.ndarray, np.ndarray]

_IDX_HEADER = struct.Struct(">II")
_DOWNLOAD_TIMEOUT_SEC = 30


def make_toy_dataset(
    count: int = TOY_SAMPLE_COUNT,
    seed: int = 0,
    noise: float = TOY_PIXEL_NOISE,
    size: int = TOY_IMAGE_SIZE,
    classes: int = TOY_CLASS_COUNT,
) -> Dataset:
    """Single-channel ``size x size`` images, one bright quadrant per class, plus Gaussian pixel noise.

    Labels cycle through the classes before shuffling, so every class is
    represented equally (up to one sample).
    """
    if count <= 0:
        raise ValidationFailure(f"count must be positive, got {count}")
    if not 2 <= classes <= 4:
        raise ValidationFailure(f"the quadrant layout supports 2 to 4 classes, got {classes}")
    if size < 2 or size % 2:
        raise ValidationFailure(f"size must be an even number >= 2, got {size}")
    if noise < 0:
        raise ValidationFailure(f"noise must be non-negative, got {noise}")
    rng = seeded_rng(seed)
    half = size // 2
    templates = np.zeros((classes, size, size, 1))
    for label in range(classes):
        row, col = divmod(label, 2)
        templates[label, row * half : (row + 1) * half, col * half : (col + 1) * half, 0] = 1.0
    labels = rng.permutation(np.arange(count) % classes)
    images = templates[labels] + noise * rng.standard_normal((count, size, size, 1))
    logger.debug("toy dataset: %d samples, %d classes, noise %.3f, seed %d", count, classes, noise, seed)
    return images, labels.astype(np.int64)


def pair_flip_labels(labels: np.ndarray, class_count: int, rate: float, seed: int) -> np.ndarray:
    """Flip each label ``i`` to ``(i + 1) mod class_count`` independently with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ValidationFailure(f"noise rate must lie in [0, 1), got {rate}")
    labels = np.asarray(labels, dtype=np.int64)
    flip = seeded_rng(seed).random(labels.shape) < rate
    noisy = np.where(flip, (labels + 1) % class_count, labels)
    logger.info("pair-flipped %d of %d labels (rate %.2f)", int(flip.sum()), labels.size, rate)
    return noisy


def validate_dataset(images: np.ndarray, labels: np.ndarray) -> Dataset:
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 4:
        raise DatasetError(f"images must be (count, H, W, C), got shape {images.shape}")
    if labels.ndim != 1 or len(labels) != len(images):
        raise DatasetError(f"labels must be a vector of {len(images)} entries, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DatasetError(f"labels must be integers, got dtype {labels.dtype}")
    if not np.all(np.isfinite(images)):
        raise DatasetError("images contain non-finite values")
    return images, labels.astype(np.int64)


def save_dataset(path: Union[str, Path], images: np.ndarray, labels: np.ndarray) -> Path:
    images, labels = validate_dataset(images, labels)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        np.savez(handle, images=images, labels=labels)
    logger.info("Saved %d samples to %s", len(images), path)
    return path


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Read an ``.npz`` holding ``images`` and ``labels``; a missing file raises ``OSError``."""
    path = Path(path)
    with path.open("rb") as handle:
        try:
            archive = np.load(handle, allow_pickle=False)
            arrays = {key: archive[key] for key in archive.files}
        except (ValueError, EOFError, zipfile.BadZipFile) as error:
            raise DatasetError(f"{path} is not a readable .npz archive: {error}") from error
    missing = {"images", "labels"} - set(arrays)
    if missing:
        raise DatasetError(f"{path} lacks arrays {sorted(missing)}")
    images, labels = validate_dataset(arrays["images"], arrays["labels"])
    if len(images) == 0:
        raise DatasetError(f"{path} holds an empty dataset")
    return images, labels


# ---------------------------------------------------------------------------
# MNIST
# ---------------------------------------------------------------------------


def parse_idx(payload: bytes, expected_magic: int) -> np.ndarray:
    """Decode a gzip-compressed IDX file (unsigned bytes) into an array."""
    try:
        raw = gzip.decompress(payload)
    except (OSError, EOFError) as error:
        raise DatasetError(f"IDX payload is not valid gzip: {error}") from error
    if len(raw) < _IDX_HEADER.size:
        raise DatasetError("IDX payload shorter than its header")
    magic, count = _IDX_HEADER.unpack_from(raw)
    if magic != expected_magic:
        raise DatasetError(f"IDX magic {magic}, expected {expected_magic}")
    dims = magic & 0xFF
    shape = struct.unpack_from(f">{dims - 1}I", raw, _IDX_HEADER.size) if dims > 1 else ()
    offset = _IDX_HEADER.size + 4 * len(shape)
    values = np.frombuffer(raw, dtype=np.uint8, offset=offset)
    expected = count * int(np.prod(shape, dtype=np.int64))
    if values.size != expected:
        raise DatasetError(f"IDX payload holds {values.size} values, header promises {expected}")
    return values.reshape(count, *shape)


def _download(url: str) -> bytes:
    def fetch() -> bytes:
        response = requests.get(url, timeout=_DOWNLOAD_TIMEOUT_SEC)
        response.raise_for_status()
        return response.content

    return retry_with_backoff(fetch, exception_types=(requests.RequestException,), description=f"GET {url}")


def fetch_mnist(destination: Union[str, Path], base_url: str = MNIST_BASE_URL) -> Dict[str, Path]:
    """Download MNIST and store ``train.npz`` / ``test.npz`` with pixels scaled to ``[0, 1]``."""
    destination = Path(destination)
    arrays = {}
    for key, filename in MNIST_FILES.items():
        magic = IDX_IMAGE_MAGIC if key.endswith("images") else IDX_LABEL_MAGIC
        arrays[key] = parse_idx(_download(base_url.rstrip("/") + "/" + filename), magic)
    written = {}
    for split in ("train", "test"):
        images = arrays[f"{split}_images"].astype(np.float64).reshape(-1, *MNIST_SHAPE) / 255.0
        written[split] = save_dataset(destination / f"{split}.npz", images, arrays[f"{split}_labels"])
    return written
