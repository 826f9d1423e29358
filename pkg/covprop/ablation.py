"""Desk-scale hyper-parameter sweeps and the noisy-label comparison.

Every run trains a fresh network from ``builder(seed)`` on the training
split and scores it on the held-out split: by the propagated certificate, or
by Monte Carlo certification of the smoothed classifier when an ``MCConfig``
is given.
"""

import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from constants.common import ABLATION_EPOCHS, ABLATION_LAMBDA_EPOCH, TOY_SIGMA
from constants.datasets import CSV_COLUMNS
from covprop.data import Dataset, pair_flip_labels
from covprop.mc import mc_acr
from covprop.network import build_toy_convnet, forward_batch
from covprop.train import evaluate, noisy_label_finetune, train_loop
from models.configs import LossConfig, MCConfig
from models.network import NetworkSpec
from models.results import NoisyLabelRow, SweepRow
from utils.csv_export import write_csv_rows

logger = logging.getLogger(__name__)

NetworkBuilder = Callable[[int], NetworkSpec]


def toy_builder(train: Dataset, overlapping: bool = False) -> NetworkBuilder:
    images, labels = train
    shape = tuple(images.shape[1:])
    class_count = int(labels.max()) + 1
    return lambda seed: build_toy_convnet(shape, class_count, seed, overlapping=overlapping)


def toy_loss_config(**overrides: Any) -> LossConfig:
    """Toy ablation schedule: ``TOY_SIGMA`` noise, robustness term on from ``ABLATION_LAMBDA_EPOCH``."""
    settings = {"sigma": TOY_SIGMA, "epochs": ABLATION_EPOCHS, "lambda_activation_epoch": ABLATION_LAMBDA_EPOCH}
    return LossConfig(**{**settings, **overrides})


def _sweep(
    parameter: str,
    values: Sequence[float],
    train: Dataset,
    test: Dataset,
    seeds: Sequence[int],
    configs: Callable[[float], LossConfig],
    builder: NetworkBuilder,
    threads: Optional[int],
    mc_cfg: Optional[MCConfig],
) -> List[SweepRow]:
    rows = []
    for value in values:
        cfg = configs(value)
        for seed in seeds:
            result = train_loop(builder(seed), train[0], train[1], cfg, seed, threads)
            clean_acc, test_acr = evaluate(result.network, test[0], test[1], cfg.bound, threads)
            if mc_cfg is not None:
                test_acr = mc_acr(result.network, test[0], test[1], mc_cfg)
            rows.append(SweepRow(parameter=parameter, value=value, seed=seed, clean_acc=clean_acc, acr=test_acr))
            logger.info("%s=%g seed=%d: clean_acc=%.3f acr=%.4f", parameter, value, seed, clean_acc, test_acr)
    return rows


def lambda_sweep(
    train: Dataset,
    test: Dataset,
    lambdas: Sequence[float],
    seeds: Sequence[int],
    cfg: LossConfig,
    builder: Optional[NetworkBuilder] = None,
    threads: Optional[int] = None,
    mc_cfg: Optional[MCConfig] = None,
) -> List[SweepRow]:
    """Train once per (lambda, seed) with the rest of ``cfg`` fixed."""
    return _sweep(
        "lambda",
        lambdas,
        train,
        test,
        seeds,
        lambda lam: cfg.model_copy(update={"lam": lam}),
        builder or toy_builder(train),
        threads,
        mc_cfg,
    )


def rmax_sweep(
    train: Dataset,
    test: Dataset,
    r_values: Sequence[float],
    seeds: Sequence[int],
    cfg: LossConfig,
    builder: Optional[NetworkBuilder] = None,
    threads: Optional[int] = None,
    mc_cfg: Optional[MCConfig] = None,
) -> List[SweepRow]:
    """Train with each assumed correlation bound ``r_max``.

    The default network is the overlapping toy convnet: with disjoint windows
    neighbouring pixels are uncorrelated and ``r_max`` only scales the bound.
    The propagated score inflates every convolution covariance by
    ``1 + r_max`` at certification time as well, which shrinks the radius of
    any fixed network; pass ``mc_cfg`` to score what the training-time bound
    does to the smoothed classifier.
    """
    return _sweep(
        "r_max",
        r_values,
        train,
        test,
        seeds,
        lambda r: cfg.model_copy(update={"r_max": r}),
        builder or toy_builder(train, overlapping=True),
        threads,
        mc_cfg,
    )


def median_by_value(rows: Sequence[SweepRow], metric: str = "acr") -> Dict[float, float]:
    """Median of ``metric`` over seeds for every swept value, in sweep order."""
    values = list(dict.fromkeys(row.value for row in rows))
    return {value: float(np.median([getattr(row, metric) for row in rows if row.value == value])) for value in values}


def _accuracy(net: NetworkSpec, test: Dataset) -> float:
    return float(np.mean(np.argmax(forward_batch(net, test[0]), axis=1) == test[1]))


def noisy_label_comparison(
    train: Dataset,
    test: Dataset,
    rate: float,
    seeds: Sequence[int],
    cfg: LossConfig,
    warmup_epochs: Optional[int] = None,
    builder: Optional[NetworkBuilder] = None,
    threads: Optional[int] = None,
) -> List[NoisyLabelRow]:
    """Naive training on pair-flipped labels vs the same warm start fine-tuned with the top-radius rule.

    Both arms share ``warmup_epochs`` of plain training on the noisy labels
    and then run ``cfg.epochs`` more: the naive arm with classification loss
    only, the other through ``noisy_label_finetune``. Accuracy is measured
    against the clean test labels.
    """
    builder = builder or toy_builder(train)
    images, labels = train
    class_count = int(labels.max()) + 1
    plain = cfg.model_copy(update={"lam": 0.0})
    warmup = plain.model_copy(update={"epochs": warmup_epochs or cfg.epochs})
    finetune = cfg.model_copy(update={"lambda_activation_epoch": 0})
    rows = []
    for seed in seeds:
        noisy = pair_flip_labels(labels, class_count, rate, seed)
        warm = train_loop(builder(seed), images, noisy, warmup, seed, threads).network
        naive = train_loop(warm, images, noisy, plain, seed, threads).network
        tuned = noisy_label_finetune(warm, images, noisy, finetune, seed, threads).network
        row = NoisyLabelRow(
            seed=seed, noise_rate=rate, naive_acc=_accuracy(naive, test), finetuned_acc=_accuracy(tuned, test)
        )
        logger.info("noise %.2f seed %d: naive %.3f, fine-tuned %.3f", rate, seed, row.naive_acc, row.finetuned_acc)
        rows.append(row)
    return rows


def write_sweep_csv(rows: Sequence[Union[SweepRow, NoisyLabelRow]], path: Union[str, Path]) -> int:
    kind = "noisy" if rows and isinstance(rows[0], NoisyLabelRow) else "sweep"
    return write_csv_rows(path, CSV_COLUMNS[kind], (row.model_dump() for row in rows))
