import math

import numpy as np
import pytest
from pydantic import ValidationError

from covprop.certify import certify_image
from covprop.data import make_toy_dataset
from covprop.errors import DatasetError, TrainingDivergedError, ValidationFailure
from covprop.moments import block_quadratic, propagate_all
from covprop.network import build_linear, build_toy_convnet, iter_parameters, replace_parameters
from covprop.numkit import seeded_rng
from covprop.train import (
    backward_all,
    block_quadratic_backward,
    forward_with_tape,
    loss_classification,
    loss_robustness,
    noisy_label_finetune,
    top_radius_indices,
    total_loss,
    train_loop,
    write_metrics_csv,
)
from models.configs import BoundConfig, LossConfig
from models.network import NetworkSpec
from tests.conftest import random_convnet
from utils.csv_export import read_csv_rows

STEP = 1e-5


def _central_difference(fn, array: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        plus, minus = array.copy(), array.copy()
        plus[index] += STEP
        minus[index] -= STEP
        grad[index] = (fn(plus) - fn(minus)) / (2 * STEP)
    return grad


def _relative_gap(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8))


def _zero_bias(net: NetworkSpec) -> NetworkSpec:
    return replace_parameters(
        net, {name: np.zeros_like(value) for name, value in iter_parameters(net) if name.endswith(".bias")}
    )


### Losses ###
@pytest.mark.smoke
def test_classification_loss_of_uniform_logits():
    value, grad = loss_classification(np.zeros(10), 3)
    assert value == pytest.approx(math.log(10), abs=1e-12)
    assert grad.sum() == pytest.approx(0.0, abs=1e-15)
    assert grad[3] == pytest.approx(-0.9)


def test_classification_gradient_matches_finite_differences(rng):
    mu = rng.standard_normal(6) * 2
    _, grad = loss_classification(mu, 4)
    numeric = _central_difference(lambda m: loss_classification(m, 4)[0], mu)
    assert _relative_gap(grad, numeric) <= 1e-6


def test_robustness_hinge_worked_example():
    cfg = LossConfig(sigma=0.5, gamma=2.0)
    result = loss_robustness(np.array([0.5, 0.0]), np.eye(2), 0, cfg)
    assert result.value == pytest.approx(2 - 0.5 * 0.5 / math.sqrt(2), abs=1e-12)
    assert result.value == pytest.approx(1.82322, abs=1e-5)
    assert result.active and not result.degenerate
    assert result.runner_up == 1


def test_inactive_hinge_has_zero_gradients():
    cfg = LossConfig(sigma=0.5, gamma=0.1)
    result = loss_robustness(np.array([5.0, 0.0, -1.0]), np.eye(3), 0, cfg)
    assert result.value == 0.0
    assert not result.active
    assert not np.any(result.grad_mu) and not np.any(result.grad_cov)


def test_degenerate_variance_is_flagged():
    result = loss_robustness(np.array([0.5, 0.0]), np.ones((2, 2)), 0, LossConfig(sigma=0.5, gamma=2.0))
    assert result.degenerate
    assert not np.any(result.grad_mu) and not np.any(result.grad_cov)


def test_degenerate_variance_contributes_no_loss_when_the_label_trails():
    result = loss_robustness(np.array([0.0, 0.5]), np.ones((2, 2)), 0, LossConfig(sigma=0.5, gamma=2.0))
    assert result.degenerate
    assert result.value == 0.0
    assert not result.active
    assert result.runner_up == 1


def test_robustness_gradients_match_finite_differences():
    cfg = LossConfig(sigma=0.5, gamma=50.0)
    for seed in range(100):
        rng = seeded_rng(seed)
        mu = rng.standard_normal(4)
        a = rng.standard_normal((4, 4))
        cov = a @ a.T + 0.1 * np.eye(4)
        label = int(rng.integers(4))
        result = loss_robustness(mu, cov, label, cfg)
        assert result.active
        numeric_mu = _central_difference(lambda m: loss_robustness(m, cov, label, cfg).value, mu)
        numeric_cov = _central_difference(lambda s: loss_robustness(mu, s, label, cfg).value, cov)
        assert _relative_gap(result.grad_mu, numeric_mu) <= 1e-5
        assert _relative_gap(result.grad_cov, numeric_cov) <= 1e-5


### Reverse mode ###
def test_forward_with_tape_agrees_with_moment_propagation(rng):
    net = random_convnet(seed=20)
    image = rng.standard_normal((6, 6, 1))
    bound = BoundConfig(sigma_in=0.3, r_max=0.2)
    mu, cov, tape = forward_with_tape(net, image, bound)
    final, _ = propagate_all(net, image, bound)
    assert np.allclose(mu, final.means.reshape(-1), atol=1e-12)
    assert np.allclose(cov, final.cov, atol=1e-12)
    assert len(tape.records) == len(net.layers)
    assert tape.tau == pytest.approx(1.2)
    assert all(record.layer is layer for record, layer in zip(tape.records, net.layers))
    assert set(tape.records[0].cache) == {"cols", "cov"}
    with pytest.raises(ValidationError):
        tape.records[0].cache = {}


def test_block_quadratic_backward_matches_finite_differences(rng):
    cov = rng.standard_normal((3, 3))
    cov = cov @ cov.T
    weights = rng.standard_normal((6, 4))
    upstream = rng.standard_normal((4, 4))
    grad_w, grad_s = block_quadratic_backward(cov, weights, upstream, factor=1.3)
    numeric_w = _central_difference(lambda w: np.sum(upstream * block_quadratic(cov, w, 1.3)), weights)
    numeric_s = _central_difference(lambda s: np.sum(upstream * block_quadratic(s, weights, 1.3)), cov)
    assert _relative_gap(grad_w, numeric_w) <= 1e-7
    assert _relative_gap(grad_s, numeric_s) <= 1e-7


def test_every_parameter_gradient_matches_finite_differences(rng):
    net = random_convnet(seed=21)
    image = rng.standard_normal((6, 6, 1))
    cfg = LossConfig(sigma=0.5, gamma=50.0, r_max=0.2)
    lam = 0.7
    analytic = total_loss(net, image, 1, cfg, lam).grads
    for name, value in iter_parameters(net):

        def loss_at(candidate: np.ndarray, key: str = name) -> float:
            return total_loss(replace_parameters(net, {key: candidate}), image, 1, cfg, lam).total

        numeric = _central_difference(loss_at, np.array(value))
        assert _relative_gap(analytic[name], numeric) <= 1e-4, name


def test_mean_path_reduces_to_plain_backprop(rng):
    net = build_linear((2, 2, 1), 3, hidden=(5,), seed=22)
    image = rng.standard_normal((2, 2, 1))
    label = 2
    mu, cov, tape = forward_with_tape(net, image, BoundConfig(sigma_in=0.0))
    _, grad_mu = loss_classification(mu, label)
    grads = backward_all(net, tape, grad_mu, np.zeros_like(cov))

    w1, b1 = net.layers[1].weights, net.layers[1].bias
    w2, b2 = net.layers[3].weights, net.layers[3].bias
    x = image.reshape(-1)
    hidden = x @ w1 + b1
    active = np.maximum(hidden, 0.0)
    logits = active @ w2 + b2
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    g_out = probs - np.eye(3)[label]
    g_hidden = (w2 @ g_out) * (hidden > 0)
    expected = {
        "3.weights": np.outer(active, g_out),
        "3.bias": g_out,
        "1.weights": np.outer(x, g_hidden),
        "1.bias": g_hidden,
    }
    for name, value in expected.items():
        assert np.allclose(grads[name], value, rtol=0, atol=1e-10), name


def test_zero_image_moves_the_first_conv_only_through_the_covariance():
    net = _zero_bias(random_convnet(seed=23))
    image = np.zeros((6, 6, 1))
    cfg = LossConfig(sigma=0.5, gamma=50.0)
    point = forward_with_tape(net, image, BoundConfig(sigma_in=0.0))
    point_grads = backward_all(net, point[2], loss_classification(point[0], 0)[1], np.zeros((3, 3)))
    assert not np.any(point_grads["0.weights"])
    noisy = total_loss(net, image, 0, cfg, lam=0.5)
    assert np.linalg.norm(noisy.grads["0.weights"]) > 0


def test_tape_from_another_network_is_rejected(rng):
    net = random_convnet(seed=24)
    other = random_convnet(seed=25)
    mu, cov, tape = forward_with_tape(other, rng.standard_normal((6, 6, 1)), BoundConfig())
    with pytest.raises(ValidationFailure):
        backward_all(net, tape, np.zeros_like(mu), np.zeros_like(cov))


def test_total_loss_decomposes_and_saturates(rng):
    net = build_linear((2, 2, 1), 3, hidden=(4,), seed=26)
    image = rng.standard_normal((2, 2, 1))
    mu, _, _ = forward_with_tape(net, image, BoundConfig(sigma_in=0.25))
    label = int(np.argmax(mu))

    active = total_loss(net, image, label, LossConfig(sigma=0.25, gamma=100.0), lam=0.3)
    assert active.total == active.loss_c + 0.3 * active.loss_cr

    cfg = LossConfig(sigma=0.25, gamma=1e-9)
    saturated = total_loss(net, image, label, cfg, lam=0.3)
    plain = total_loss(net, image, label, cfg, lam=0.0)
    assert saturated.loss_cr == 0.0
    for name in plain.grads:
        assert np.array_equal(saturated.grads[name], plain.grads[name])


### Optimization ###
def test_separable_data_is_fit_exactly():
    images, labels = make_toy_dataset(count=32, seed=1, noise=0.1, classes=2)
    net = build_toy_convnet((8, 8, 1), 2, seed=1)
    cfg = LossConfig(lam=0.0, sigma=0.25, epochs=20, batch_size=8, lr_schedule=[(0, 0.05)])
    result = train_loop(net, images, labels, cfg, seed=1)
    assert result.metrics[-1].clean_acc == 1.0


def test_training_is_deterministic_across_worker_counts(toy_dataset, tmp_path):
    images, labels = toy_dataset
    net = build_toy_convnet((8, 8, 1), 4, seed=2)
    cfg = LossConfig(lam=0.5, sigma=0.25, epochs=3, batch_size=8, lambda_activation_epoch=1, lr_schedule=[(0, 0.02)])
    first = train_loop(net, images[:24], labels[:24], cfg, seed=5, threads=1)
    second = train_loop(net, images[:24], labels[:24], cfg, seed=5, threads=3)
    for (name, a), (_, b) in zip(iter_parameters(first.network), iter_parameters(second.network)):
        assert np.array_equal(a, b), name
    assert first.metrics == second.metrics
    assert len(first.metrics) == 3
    assert first.metrics[0].mean_loss_cr == 0.0

    path = tmp_path / "metrics.csv"
    assert write_metrics_csv(first.metrics, path) == 3
    assert [int(row["epoch"]) for row in read_csv_rows(path)] == [0, 1, 2]


def test_divergence_reports_epoch_and_batch(toy_dataset):
    images, labels = toy_dataset
    net = build_toy_convnet((8, 8, 1), 4, seed=3)
    cfg = LossConfig(lam=0.0, epochs=2, batch_size=8, lr_schedule=[(0, 1e300)])
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDivergedError) as error:
            train_loop(net, images, labels, cfg, seed=0)
    assert error.value.epoch == 0
    assert error.value.exit_code == 4


def test_training_rejects_bad_datasets(toy_convnet):
    cfg = LossConfig(epochs=1)
    with pytest.raises(DatasetError):
        train_loop(toy_convnet, np.zeros((0, 8, 8, 1)), np.zeros(0, dtype=int), cfg, seed=0)
    with pytest.raises(DatasetError):
        train_loop(toy_convnet, np.zeros((2, 8, 8, 1)), np.array([0, 7]), cfg, seed=0)


### Noisy-label fine-tuning ###
def test_top_radius_indices(trained_toy_net, toy_dataset):
    images, _ = toy_dataset
    bound = BoundConfig()
    chosen = top_radius_indices(trained_toy_net, images[:8], bound, 0.25)
    assert len(chosen) == 2
    assert list(chosen) == sorted(chosen)
    radii = [certify_image(trained_toy_net, image, bound).radius for image in images[:8]]
    assert min(radii[i] for i in chosen) >= max(r for i, r in enumerate(radii) if i not in chosen)
    assert len(top_radius_indices(trained_toy_net, images[:8], bound, 0.0)) == 0


def test_noisy_label_finetune_runs_from_a_warm_start(trained_toy_net, toy_dataset):
    images, labels = toy_dataset
    cfg = LossConfig(
        lam=0.5,
        sigma=0.25,
        epochs=2,
        batch_size=8,
        lambda_activation_epoch=0,
        top_fraction=0.25,
        lr_schedule=[(0, 0.01)],
    )
    result = noisy_label_finetune(trained_toy_net, images[:16], labels[:16], cfg, seed=0)
    assert len(result.metrics) == 2
    changed = [
        not np.array_equal(a, b)
        for (_, a), (_, b) in zip(iter_parameters(trained_toy_net), iter_parameters(result.network))
    ]
    assert any(changed)
