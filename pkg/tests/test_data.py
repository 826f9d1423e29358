import gzip
import struct

import numpy as np
import pytest
import requests

from constants.datasets import IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, MNIST_BASE_URL, MNIST_FILES
from covprop.data import fetch_mnist, load_dataset, make_toy_dataset, pair_flip_labels, parse_idx, save_dataset
from covprop.errors import DatasetError, ValidationFailure


def _idx(magic: int, values: np.ndarray) -> bytes:
    header = struct.pack(">II", magic, values.shape[0]) + struct.pack(f">{values.ndim - 1}I", *values.shape[1:])
    return gzip.compress(header + values.astype(np.uint8).tobytes())


### Toy dataset ###
@pytest.mark.smoke
def test_toy_dataset_is_balanced_and_seeded():
    images, labels = make_toy_dataset(count=48, seed=5)
    assert images.shape == (48, 8, 8, 1)
    assert np.bincount(labels).tolist() == [12, 12, 12, 12]
    again, again_labels = make_toy_dataset(count=48, seed=5)
    assert np.array_equal(images, again) and np.array_equal(labels, again_labels)
    other, _ = make_toy_dataset(count=48, seed=6)
    assert not np.array_equal(images, other)


def test_noiseless_toy_images_light_one_quadrant():
    images, labels = make_toy_dataset(count=8, seed=0, noise=0.0)
    for image, label in zip(images, labels):
        row, col = divmod(int(label), 2)
        assert np.all(image[row * 4 : row * 4 + 4, col * 4 : col * 4 + 4] == 1.0)
        assert image.sum() == 16.0


@pytest.mark.parametrize("kwargs", [{"count": 0}, {"classes": 5}, {"size": 7}, {"noise": -0.1}])
def test_toy_dataset_rejects_bad_arguments(kwargs):
    with pytest.raises(ValidationFailure):
        make_toy_dataset(**kwargs)


### Label noise ###
def test_pair_flip_rate_and_direction():
    labels = np.arange(20_000) % 4
    noisy = pair_flip_labels(labels, 4, rate=0.3, seed=2)
    flipped = noisy != labels
    assert abs(flipped.mean() - 0.3) <= 0.01
    assert np.array_equal(noisy[flipped], (labels[flipped] + 1) % 4)
    assert np.array_equal(pair_flip_labels(labels, 4, rate=0.0, seed=2), labels)


@pytest.mark.parametrize("rate", [-0.1, 1.0])
def test_pair_flip_rate_must_be_a_probability(rate):
    with pytest.raises(ValidationFailure):
        pair_flip_labels(np.zeros(4, dtype=int), 2, rate, seed=0)


### Storage ###
def test_saved_dataset_loads_back(tmp_path, toy_dataset):
    images, labels = toy_dataset
    path = save_dataset(tmp_path / "nested" / "toy.npz", images, labels)
    loaded_images, loaded_labels = load_dataset(path)
    assert np.array_equal(loaded_images, images)
    assert np.array_equal(loaded_labels, labels)


def test_load_errors(tmp_path):
    with pytest.raises(OSError):
        load_dataset(tmp_path / "missing.npz")

    garbage = tmp_path / "garbage.npz"
    garbage.write_bytes(b"not an archive")
    with pytest.raises(DatasetError):
        load_dataset(garbage)

    partial = tmp_path / "partial.npz"
    np.savez(partial, images=np.zeros((2, 2, 2, 1)))
    with pytest.raises(DatasetError, match="labels"):
        load_dataset(partial)

    mismatched = tmp_path / "mismatched.npz"
    np.savez(mismatched, images=np.zeros((2, 2, 2, 1)), labels=np.zeros(3, dtype=int))
    with pytest.raises(DatasetError):
        load_dataset(mismatched)


### MNIST ###
def test_parse_idx_payloads():
    images = np.arange(18).reshape(2, 3, 3)
    assert np.array_equal(parse_idx(_idx(IDX_IMAGE_MAGIC, images), IDX_IMAGE_MAGIC), images)
    labels = np.array([7, 1, 0])
    assert np.array_equal(parse_idx(_idx(IDX_LABEL_MAGIC, labels), IDX_LABEL_MAGIC), labels)
    with pytest.raises(DatasetError, match="magic"):
        parse_idx(_idx(IDX_LABEL_MAGIC, labels), IDX_IMAGE_MAGIC)
    with pytest.raises(DatasetError):
        parse_idx(b"plain bytes", IDX_LABEL_MAGIC)
    with pytest.raises(DatasetError, match="promises"):
        parse_idx(gzip.compress(struct.pack(">II", IDX_LABEL_MAGIC, 5) + bytes(3)), IDX_LABEL_MAGIC)


def test_fetch_mnist_writes_scaled_splits(tmp_path, requests_mock):
    rng = np.random.default_rng(0)
    payloads = {
        "train_images": _idx(IDX_IMAGE_MAGIC, rng.integers(0, 256, (3, 28, 28))),
        "train_labels": _idx(IDX_LABEL_MAGIC, np.array([1, 2, 3])),
        "test_images": _idx(IDX_IMAGE_MAGIC, np.full((2, 28, 28), 255)),
        "test_labels": _idx(IDX_LABEL_MAGIC, np.array([4, 5])),
    }
    for key, filename in MNIST_FILES.items():
        requests_mock.get(MNIST_BASE_URL + filename, content=payloads[key])

    written = fetch_mnist(tmp_path)
    train_images, train_labels = load_dataset(written["train"])
    test_images, test_labels = load_dataset(written["test"])
    assert train_images.shape == (3, 28, 28, 1)
    assert 0.0 <= train_images.min() and train_images.max() <= 1.0
    assert train_labels.tolist() == [1, 2, 3]
    assert np.all(test_images == 1.0)
    assert test_labels.tolist() == [4, 5]


def test_fetch_mnist_gives_up_after_retries(tmp_path, requests_mock, monkeypatch):
    monkeypatch.setattr("utils.app_helpers.time.sleep", lambda _: None)
    requests_mock.get(MNIST_BASE_URL + MNIST_FILES["train_images"], status_code=503)
    with pytest.raises(requests.HTTPError):
        fetch_mnist(tmp_path)
    assert requests_mock.call_count == 3
