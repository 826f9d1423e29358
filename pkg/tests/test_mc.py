import math

import numpy as np
import pytest

from constants.common import TOY_SIGMA
from covprop.ablation import toy_loss_config
from covprop.data import make_toy_dataset
from covprop.errors import ValidationFailure
from covprop.mc import (
    empirical_gaussianity,
    mc_certify,
    mc_layer_moments,
    mc_predict,
    radius_cap,
    sample_counts,
    validity_crosscheck,
    write_crosscheck_csv,
    write_gaussianity_csv,
    write_layer_moments_csv,
)
from covprop.moments import propagate_all
from covprop.network import build_linear, build_residual_small, build_toy_convnet, forward
from covprop.numkit import seeded_rng, std_normal_cdf, std_normal_cdf_inv
from covprop.train import train_loop
from models.configs import BoundConfig, MCConfig
from models.network import FlattenLayer, LinearLayer, NetworkSpec
from models.results import ABSTAIN, CrosscheckReport, CrosscheckRow
from tests.conftest import random_convnet
from utils.csv_export import read_csv_rows


def _constant_net(winner: int = 1, classes: int = 3) -> NetworkSpec:
    bias = np.zeros(classes)
    bias[winner] = 5.0
    head = LinearLayer(in_dim=4, out_dim=classes, weights=np.zeros((4, classes)), bias=bias)
    return NetworkSpec(input_shape=(2, 2, 1), layers=[FlattenLayer(), head], class_count=classes)


def _two_class_linear(w: np.ndarray, b: float) -> NetworkSpec:
    """Logits ``(w.x + b, 0)``; class 0 wins on the positive side of the hyperplane."""
    weights = np.stack([w, np.zeros_like(w)], axis=1)
    head = LinearLayer(in_dim=w.size, out_dim=2, weights=weights, bias=np.array([b, 0.0]))
    return NetworkSpec(input_shape=(1, 1, w.size), layers=[FlattenLayer(), head], class_count=2)


### Sampling certifier ###
@pytest.mark.smoke
def test_constant_logits_always_win():
    net = _constant_net(winner=2)
    counts = sample_counts(net, np.zeros((2, 2, 1)), sigma=1.0, count=500, seed=0, stream=0)
    assert counts.tolist() == [0, 0, 500]
    assert mc_predict(net, np.zeros((2, 2, 1)), MCConfig(n0=50, n=500)) == 2


def test_vanishing_noise_reproduces_the_point_prediction(rng):
    net = random_convnet(seed=12)
    image = rng.standard_normal((6, 6, 1))
    predicted = mc_predict(net, image, MCConfig(n0=20, n=200, sigma=1e-9))
    assert predicted == int(np.argmax(forward(net, image)))


def test_linear_classifier_top_class_frequency():
    w = np.array([0.6, -0.8])
    net = _two_class_linear(w, b=0.1)
    x = np.array([[[0.3, 0.1]]])
    sigma, n0 = 0.5, 4000
    expected = std_normal_cdf((w @ x.reshape(-1) + 0.1) / (sigma * np.linalg.norm(w)))
    counts = sample_counts(net, x, sigma, n0, seed=3, stream=0)
    assert abs(counts[0] / n0 - expected) <= 4 * math.sqrt(expected * (1 - expected) / n0)


def test_all_successes_hit_the_closed_form_bound():
    cfg = MCConfig(n0=10, n=100, alpha=0.001, sigma=0.25)
    report = mc_certify(_constant_net(winner=0), np.zeros((2, 2, 1)), cfg)
    assert not report.abstained
    assert report.predicted == 0
    assert report.p_lower == pytest.approx(0.001 ** (1 / 100), abs=1e-8)
    assert report.radius == pytest.approx(0.25 * float(std_normal_cdf_inv(0.001 ** (1 / 100))), abs=1e-8)
    assert report.radius == pytest.approx(radius_cap(cfg), abs=1e-8)


def test_zero_margin_mostly_abstains():
    net = _two_class_linear(np.array([1.0]), b=0.0)
    reports = [
        mc_certify(net, np.zeros((1, 1, 1)), MCConfig(n0=10, n=200, alpha=0.001, sigma=0.5, seed=seed))
        for seed in range(100)
    ]
    assert sum(report.abstained for report in reports) >= 97
    for report in reports:
        assert sum(report.class_counts) == 200
        if report.abstained:
            assert report.predicted == ABSTAIN
            assert report.radius == 0.0


def test_reports_are_reproducible_across_worker_counts(rng):
    net = random_convnet(seed=13)
    image = rng.standard_normal((6, 6, 1))
    single = sample_counts(net, image, 0.5, 1000, seed=7, stream=1, batch_size=64, threads=1)
    pooled = sample_counts(net, image, 0.5, 1000, seed=7, stream=1, batch_size=64, threads=4)
    assert np.array_equal(single, pooled)
    cfg = MCConfig(n0=20, n=300, seed=7, batch_size=64)
    assert mc_certify(net, image, cfg) == mc_certify(net, image, cfg)


### Empirical layer statistics ###
def test_linear_network_empirical_covariance_matches_chain():
    rng = seeded_rng(14)
    w1, w2 = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    layers = [
        FlattenLayer(),
        LinearLayer(in_dim=4, out_dim=3, weights=w1, bias=np.zeros(3)),
        LinearLayer(in_dim=3, out_dim=2, weights=w2, bias=np.zeros(2)),
    ]
    net = NetworkSpec(input_shape=(2, 2, 1), layers=layers, class_count=2)
    sigma, n = 0.3, 20_000
    moments = mc_layer_moments(net, rng.standard_normal((2, 2, 1)), sigma, n, seed=1, layers=[3])
    exact = sigma**2 * w2.T @ w1.T @ w1 @ w2
    assert moments[0].layer_index == 3
    assert np.linalg.norm(moments[0].cov - exact) <= 10 * np.linalg.norm(exact) / math.sqrt(n)


def test_zero_noise_gives_zero_empirical_covariance(linear_net):
    moments = mc_layer_moments(linear_net, np.ones((2, 2, 1)), 0.0, 200, seed=0)
    assert len(moments) == len(linear_net.layers) + 1
    assert all(np.allclose(item.cov, 0.0, atol=1e-10) for item in moments)


def test_layer_moments_flags_and_guards(linear_net):
    moments = mc_layer_moments(linear_net, np.ones((2, 2, 1)), 0.25, 200, seed=0)
    assert [item.pre_activation for item in moments] == [False, False, True, False, False]
    with pytest.raises(ValidationFailure):
        mc_layer_moments(linear_net, np.ones((2, 2, 1)), 0.25, 10, seed=0)
    with pytest.raises(ValidationFailure):
        mc_layer_moments(linear_net, np.ones((2, 2, 1)), 0.25, 200, seed=0, layers=[9])


def test_input_pixels_are_uncorrelated():
    net = random_convnet(seed=15)
    moments = mc_layer_moments(net, np.zeros((6, 6, 1)), 0.5, 4000, seed=2, layers=[0, 1])
    assert moments[0].max_cross_corr < 0.1
    assert moments[0].mean_variance == pytest.approx(0.25, rel=0.05)
    assert moments[1].max_cross_corr > moments[0].max_cross_corr


def test_propagated_variance_dominates_the_sampled_one_after_a_convolution(rng):
    net = random_convnet(seed=16)
    image = rng.standard_normal((6, 6, 1))
    cfg = BoundConfig(sigma_in=0.25, r_max=0.2)
    _, trace = propagate_all(net, image, cfg)
    (item,) = mc_layer_moments(net, image, cfg.sigma_in, 4000, seed=3, layers=[1])
    assert item.pre_activation
    assert float(np.mean(np.diag(trace[1].cov))) >= item.mean_variance


def test_gaussianity_export(tmp_path, rng):
    net = random_convnet(seed=17)
    image = rng.standard_normal((6, 6, 1))
    export = empirical_gaussianity(net, image, 0.25, 300, layer=1, channel_pair=(0, 1), seed=5)
    assert export.samples.shape == (300, 2)
    assert export.semi_major >= export.semi_minor >= 0.0
    again = empirical_gaussianity(net, image, 0.25, 300, layer=1, channel_pair=(0, 1), seed=5)
    assert np.array_equal(export.samples, again.samples)

    empirical_axes = np.sqrt(np.linalg.eigvalsh(np.cov(export.samples, rowvar=False)))
    assert export.semi_major >= empirical_axes[1] * 0.8
    assert export.semi_minor >= empirical_axes[0] * 0.8

    ellipse_path = write_gaussianity_csv(export, tmp_path / "scatter.csv")
    assert ellipse_path.name == "scatter_ellipse.csv"
    assert len(read_csv_rows(tmp_path / "scatter.csv")) == 300
    assert float(read_csv_rows(ellipse_path)[0]["semi_major"]) == export.semi_major

    with pytest.raises(ValidationFailure):
        empirical_gaussianity(net, image, 0.25, 10, layer=1, channel_pair=(1, 1))


def test_layer_moments_csv(tmp_path, linear_net):
    moments = mc_layer_moments(linear_net, np.ones((2, 2, 1)), 0.25, 200, seed=0)
    path = tmp_path / "moments.csv"
    assert write_layer_moments_csv(moments, path) == 5
    assert read_csv_rows(path)[2]["pre_activation"] == "1"


### Propagated vs sampled radii ###
def test_radius_cap_closed_form():
    cfg = MCConfig(n0=10, n=100_000, alpha=0.001, sigma=0.5)
    assert radius_cap(cfg) == pytest.approx(0.5 * float(std_normal_cdf_inv(0.001 ** 1e-5)))


@pytest.mark.slow
def test_propagated_radius_is_conservative_on_a_linear_classifier(tmp_path):
    net = build_linear((1, 1, 2), 2, seed=18)
    images = seeded_rng(18).standard_normal((10, 1, 1, 2)) * 0.3
    mc_cfg = MCConfig(n0=100, n=100_000, alpha=0.001, sigma=0.5, seed=4)
    report = validity_crosscheck(net, images, mc_cfg, BoundConfig(sigma_in=0.5, r_max=0.0))
    assert len(report.rows) == 10
    assert report.eligible_count > 0
    assert report.pass_fraction >= 0.95

    path = tmp_path / "crosscheck.csv"
    assert write_crosscheck_csv(report, path) == 10
    assert list(read_csv_rows(path)[0])[:3] == ["sample_id", "predicted", "prop_radius"]


def test_pass_fraction_is_undefined_without_eligible_samples():
    capped = CrosscheckRow(
        sample_id=0, predicted=1, prop_radius=5.0, mc_radius=3.8, abstained=False, eligible=False, within_tolerance=True
    )
    report = CrosscheckReport(rows=[capped], tolerance=0.05, radius_cap=3.8)
    assert report.eligible_count == 0
    assert report.pass_fraction is None


def test_crosscheck_without_eligible_samples_has_no_pass_fraction():
    net = _two_class_linear(np.array([0.6, -0.8]), b=0.1)
    # five draws cannot push the lower bound past one half at alpha=0.001
    mc_cfg = MCConfig(n0=10, n=5, alpha=0.001, sigma=0.5)
    report = validity_crosscheck(net, np.zeros((3, 1, 1, 2)), mc_cfg, BoundConfig(sigma_in=0.5, r_max=0.0))
    assert all(row.abstained for row in report.rows)
    assert report.eligible_count == 0
    assert report.pass_fraction is None


@pytest.mark.slow
def test_propagated_radius_is_conservative_on_a_trained_toy_net():
    images, labels = make_toy_dataset(256, seed=0)
    net = build_toy_convnet(images.shape[1:], 4, seed=0)
    loss_cfg = toy_loss_config()
    trained = train_loop(net, images[:192], labels[:192], loss_cfg, seed=0).network
    mc_cfg = MCConfig(n0=100, n=100_000, alpha=0.001, sigma=TOY_SIGMA, seed=0)
    report = validity_crosscheck(trained, images[192:222], mc_cfg, loss_cfg.bound)
    assert report.eligible_count >= 10
    assert report.pass_fraction >= 0.95


@pytest.mark.slow
def test_propagated_covariance_dominates_the_sampled_one():
    n = 100_000
    for seed in range(20):
        net = random_convnet(seed)
        image = seeded_rng(seed).standard_normal((6, 6, 1))
        flat_outputs = {index + 1 for index, layer in enumerate(net.layers) if isinstance(layer, FlattenLayer)}
        layers = [index for index in range(len(net.layers) + 1) if index not in flat_outputs]
        sampled = mc_layer_moments(net, image, 0.25, n, seed=seed, layers=layers)
        r_max = min(max(item.max_cross_corr for item in sampled), 0.999)
        _, trace = propagate_all(net, image, BoundConfig(sigma_in=0.25, r_max=r_max))
        for item in sampled:
            state = trace[item.layer_index]
            gap = np.linalg.eigvalsh(state.cov - item.cov)[0]
            assert gap >= -10 * np.linalg.norm(state.cov) / math.sqrt(n), (seed, item.layer_index)


@pytest.mark.slow
def test_residual_depth_grows_the_variance_overestimate():
    net = build_residual_small((8, 8, 1), 3, blocks=6, seed=0)
    assert len(net.layers) == 17
    image = seeded_rng(0).standard_normal((8, 8, 1))
    sampled = mc_layer_moments(net, image, 0.25, 1000, seed=0, layers=range(1, 18))
    _, trace = propagate_all(net, image, BoundConfig(sigma_in=0.25, r_max=0.2))
    ratios = []
    for item in sampled:
        propagated = float(np.mean(np.diag(trace[item.layer_index].cov)))
        assert propagated >= item.mean_variance, item.layer_index
        ratios.append(propagated / item.mean_variance)
    assert ratios[-1] >= ratios[0]
