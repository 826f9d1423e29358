import numpy as np
import pytest

from constants.common import (
    ABLATION_NOISE_RATE,
    ABLATION_TRAIN_FRACTION,
    NOISY_FINETUNE_EPOCHS,
    NOISY_TOP_FRACTION,
    NOISY_WARMUP_EPOCHS,
    TOY_SAMPLE_COUNT,
)
from covprop.ablation import (
    lambda_sweep,
    median_by_value,
    noisy_label_comparison,
    rmax_sweep,
    toy_builder,
    toy_loss_config,
    write_sweep_csv,
)
from covprop.data import make_toy_dataset
from covprop.mc import mc_acr
from covprop.train import train_loop
from models.configs import LossConfig, MCConfig
from models.results import SweepRow
from utils.csv_export import read_csv_rows

pytestmark = pytest.mark.slow

CFG = LossConfig(sigma=0.25, epochs=2, batch_size=8, lambda_activation_epoch=1, lr_schedule=[(0, 0.05)])


@pytest.fixture(scope="module")
def split():
    images, labels = make_toy_dataset(count=40, seed=3)
    return (images[:32], labels[:32]), (images[32:], labels[32:])


@pytest.fixture(scope="module")
def toy_split():
    images, labels = make_toy_dataset(count=TOY_SAMPLE_COUNT, seed=0)
    cut = int(round(ABLATION_TRAIN_FRACTION * len(images)))
    return (images[:cut], labels[:cut]), (images[cut:], labels[cut:])


def test_lambda_sweep_rows_and_determinism(split, tmp_path):
    train, test = split
    rows = lambda_sweep(train, test, [0.0, 0.5], seeds=[0, 1], cfg=CFG)
    assert [(row.parameter, row.value, row.seed) for row in rows] == [
        ("lambda", 0.0, 0),
        ("lambda", 0.0, 1),
        ("lambda", 0.5, 0),
        ("lambda", 0.5, 1),
    ]
    assert all(0.0 <= row.clean_acc <= 1.0 and row.acr >= 0.0 for row in rows)
    assert rows == lambda_sweep(train, test, [0.0, 0.5], seeds=[0, 1], cfg=CFG, threads=2)

    path = tmp_path / "sweep.csv"
    assert write_sweep_csv(rows, path) == 4
    assert list(read_csv_rows(path)[0]) == ["parameter", "value", "seed", "clean_acc", "acr"]


def test_rmax_sweep_uses_the_swept_bound(split):
    train, test = split
    builder = toy_builder(train)
    rows = rmax_sweep(train, test, [0.0, 0.3], seeds=[2], cfg=CFG, builder=builder)
    assert [(row.parameter, row.value) for row in rows] == [("r_max", 0.0), ("r_max", 0.3)]


def test_mc_scored_rmax_sweep_trains_the_overlapping_net(split):
    train, test = split
    mc_cfg = MCConfig(sigma=CFG.sigma, n0=20, n=200, seed=4)
    rows = rmax_sweep(train, test, [0.3], seeds=[2], cfg=CFG, mc_cfg=mc_cfg)
    trained = train_loop(
        toy_builder(train, overlapping=True)(2), train[0], train[1], CFG.model_copy(update={"r_max": 0.3}), 2
    ).network
    assert trained.layers[0].kernel == 3
    assert rows[0].acr == pytest.approx(mc_acr(trained, test[0], test[1], mc_cfg), abs=1e-12)


def test_median_by_value_keeps_sweep_order():
    rows = [
        SweepRow(parameter="lambda", value=value, seed=seed, clean_acc=0.5, acr=acr)
        for value, seed, acr in [(0.5, 0, 0.1), (0.5, 1, 0.3), (0.5, 2, 0.2), (0.0, 0, 0.05), (0.0, 1, 0.15)]
    ]
    assert median_by_value(rows) == pytest.approx({0.5: 0.2, 0.0: 0.1})
    assert list(median_by_value(rows)) == [0.5, 0.0]
    assert median_by_value(rows, metric="clean_acc") == {0.5: 0.5, 0.0: 0.5}


def test_noisy_label_comparison(split, tmp_path):
    train, test = split
    cfg = CFG.model_copy(update={"top_fraction": 0.25})
    rows = noisy_label_comparison(train, test, rate=0.45, seeds=[0, 1], cfg=cfg, warmup_epochs=1)
    assert [row.seed for row in rows] == [0, 1]
    assert all(row.noise_rate == 0.45 for row in rows)
    assert all(np.isfinite([row.naive_acc, row.finetuned_acc]).all() for row in rows)

    path = tmp_path / "noisy.csv"
    assert write_sweep_csv(rows, path) == 2
    assert list(read_csv_rows(path)[0]) == ["seed", "noise_rate", "naive_acc", "finetuned_acc"]


### Toy regime ###
def test_robustness_weight_raises_held_out_acr(toy_split):
    train, test = toy_split
    rows = lambda_sweep(train, test, [0.0, 0.5], seeds=[0, 1, 2], cfg=toy_loss_config())
    acr = median_by_value(rows)
    clean_acc = median_by_value(rows, metric="clean_acc")
    assert acr[0.5] >= 1.2 * acr[0.0]
    assert clean_acc[0.0] - clean_acc[0.5] <= 0.05


def test_finetuning_beats_naive_training_under_pair_flips(toy_split):
    train, test = toy_split
    cfg = toy_loss_config(epochs=NOISY_FINETUNE_EPOCHS, top_fraction=NOISY_TOP_FRACTION)
    rows = noisy_label_comparison(
        train, test, ABLATION_NOISE_RATE, seeds=[0, 1, 2], cfg=cfg, warmup_epochs=NOISY_WARMUP_EPOCHS
    )
    assert np.median([row.finetuned_acc - row.naive_acc for row in rows]) >= 0.05
