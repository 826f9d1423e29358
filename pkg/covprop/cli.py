"""``covprop`` command line.

Exit codes: 0 success, 2 I/O, 3 validation, 4 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from constants.common import (
    ABLATION_EPOCHS,
    ABLATION_MC_SAMPLES,
    ABLATION_NOISE_RATE,
    ABLATION_R_GRID,
    ABLATION_SEED_COUNT,
    ABLATION_TRAIN_FRACTION,
    COVPROP_LOG_LEVEL,
    GAUSSIANITY_SAMPLES,
    NOISY_FINETUNE_EPOCHS,
    NOISY_TOP_FRACTION,
    NOISY_WARMUP_EPOCHS,
    TOY_SIGMA,
)
from constants.datasets import COST_MODES, CSV_COLUMNS
from covprop import __version__
from covprop.ablation import lambda_sweep, median_by_value, noisy_label_comparison, rmax_sweep, write_sweep_csv
from covprop.certify import certify_dataset, format_summary, write_certification_csv
from covprop.cost import bookkeeping_counts, format_cost_table, memory_footprint, write_cost_csv
from covprop.data import fetch_mnist, load_dataset, make_toy_dataset, pair_flip_labels, save_dataset
from covprop.errors import CovPropError, InvariantBreach, ValidationFailure
from covprop.interval import tightness_report
from covprop.mc import (
    empirical_gaussianity,
    mc_certify,
    mc_layer_moments,
    validity_crosscheck,
    write_crosscheck_csv,
    write_gaussianity_csv,
    write_mc_certification_csv,
)
from covprop.moments import propagate_all, trace_rows, write_trace_csv
from covprop.network import build_lenet_small, build_toy_convnet, load, save
from covprop.train import noisy_label_finetune, train_loop, write_metrics_csv
from models.configs import RunConfig
from models.network import NetworkSpec
from utils.csv_export import write_csv_rows
from utils.logging_config import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 2
EXIT_VALIDATION = 3

TOY_ARCH_MAX_PIXELS = 64


def _shape(text: str) -> Tuple[int, int, int]:
    parts = text.replace("x", ",").split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected H,W,C, got {text!r}")
    try:
        return tuple(int(part) for part in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three integers, got {text!r}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add(parser: argparse.ArgumentParser, *flags: str) -> None:
    """Attach the named shared flags; defaults stay ``None`` so ``RunConfig`` supplies them."""
    options: Dict[str, Tuple[Tuple[str, ...], dict]] = {
        "model": (("--model",), {"type": Path, "help": "model file (input, or checkpoint output for train)"}),
        "data": (("--data",), {"type": Path, "help": "dataset .npz with images and labels"}),
        "out": (("--out",), {"type": Path, "help": "output path"}),
        "sigma": (("--sigma",), {"type": float, "help": "input noise level"}),
        "rmax": (("--rmax",), {"type": float, "help": "assumed bound on cross-pixel correlation"}),
        "lambda": (("--lambda",), {"type": float, "dest": "lam", "help": "robustness loss weight"}),
        "gamma": (("--gamma",), {"type": float, "help": "hinge offset (default 8 sigma)"}),
        "n0": (("--n0",), {"type": int, "help": "Monte Carlo selection draws"}),
        "n": (("--n",), {"type": int, "help": "Monte Carlo estimation draws"}),
        "alpha": (("--alpha",), {"type": float, "help": "failure probability of the MC bound"}),
        "seed": (("--seed",), {"type": int}),
        "epochs": (("--epochs",), {"type": int}),
        "noise-rate": (("--noise-rate",), {"type": float, "dest": "noise_rate", "help": "pair-flip label noise"}),
        "resume": (("--resume",), {"type": Path, "help": "checkpoint to continue from"}),
        "kernel": (("--kernel",), {"type": int}),
        "depth": (("--depth",), {"type": int}),
        "shape": (("--shape",), {"type": _shape, "help": "H,W,C"}),
        "count": (("--count",), {"type": int}),
    }
    for flag in flags:
        names, kwargs = options[flag]
        parser.add_argument(*names, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covprop", description="Certified radii by covariance propagation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", dest="log_level", default=COVPROP_LOG_LEVEL, help="DEBUG, INFO, WARNING, ...")
    commands = parser.add_subparsers(dest="command", required=True)

    certify = commands.add_parser("certify", parents=[common], help="propagated certification of a dataset")
    _add(certify, "model", "data", "sigma", "rmax", "out")

    mc = commands.add_parser("mc-certify", parents=[common], help="Monte Carlo certification of a dataset")
    _add(mc, "model", "data", "sigma", "rmax", "n0", "n", "alpha", "seed", "out", "count")
    mc.add_argument("--mode", choices=["certify", "crosscheck"], default="certify")

    compare = commands.add_parser("compare", parents=[common], help="per-layer propagated vs sampled moments")
    _add(compare, "model", "data", "sigma", "rmax", "n", "seed", "out")

    train = commands.add_parser("train", parents=[common], help="train or fine-tune a network")
    _add(train, "model", "data", "sigma", "rmax", "lambda", "gamma", "seed", "epochs", "noise-rate", "resume", "out")
    train.add_argument("--mode", choices=["plain", "finetune"], default="plain")

    cost = commands.add_parser("cost", parents=[common], help="bookkeeping cost of explicit correlation tracking")
    _add(cost, "kernel", "depth", "shape", "out")
    cost.add_argument("--mode", choices=COST_MODES, default="overlap")

    toydata = commands.add_parser("toydata", parents=[common], help="write the seeded toy dataset")
    _add(toydata, "out", "seed", "count")

    mnist = commands.add_parser("fetch-mnist", parents=[common], help="download MNIST as .npz files")
    _add(mnist, "out")

    ablate = commands.add_parser("ablate", parents=[common], help="lambda / r_max sweeps and the noisy-label run")
    _add(ablate, "data", "sigma", "rmax", "lambda", "gamma", "seed", "epochs", "noise-rate", "n", "out")
    ablate.add_argument("--mode", choices=["lambda", "rmax", "noisy"], default="lambda")
    ablate.set_defaults(sigma=TOY_SIGMA, epochs=ABLATION_EPOCHS, n=ABLATION_MC_SAMPLES)
    return parser


def parse_run_config(argv: Optional[Sequence[str]] = None) -> RunConfig:
    namespace = build_parser().parse_args(argv)
    return RunConfig(**{key: value for key, value in vars(namespace).items() if value is not None})


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _require(cfg: RunConfig, *names: str) -> None:
    """Fail before any compute when a required input is missing or unreadable."""
    for name in names:
        path: Optional[Path] = getattr(cfg, name)
        if path is None:
            raise ValidationFailure(f"{cfg.command} needs --{name}")
        if not path.is_file():
            raise FileNotFoundError(f"--{name} {path} does not exist or is not a file")


def _out(cfg: RunConfig, default: str) -> Path:
    path = cfg.out or Path(default)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_model(path: Path) -> NetworkSpec:
    return load(path.read_bytes())


def _default_network(images: np.ndarray, labels: np.ndarray, seed: int) -> NetworkSpec:
    shape = tuple(images.shape[1:])
    class_count = int(labels.max()) + 1
    if shape[0] * shape[1] <= TOY_ARCH_MAX_PIXELS:
        return build_toy_convnet(shape, class_count, seed)
    return build_lenet_small(shape, class_count, seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_certify(cfg: RunConfig) -> int:
    _require(cfg, "model", "data")
    net = _load_model(cfg.model)
    images, labels = load_dataset(cfg.data)
    rows = certify_dataset(net, images, labels, cfg.bound_config())
    out = _out(cfg, "certify.csv")
    write_certification_csv(rows, out)
    _, trace = propagate_all(net, images[0], cfg.bound_config())
    write_trace_csv(trace_rows(trace), out.with_name(f"{out.stem}_trace.csv"))
    print(format_summary(rows))
    return EXIT_OK


def cmd_mc_certify(cfg: RunConfig) -> int:
    _require(cfg, "model", "data")
    net = _load_model(cfg.model)
    images, labels = load_dataset(cfg.data)
    if cfg.count is not None:
        images, labels = images[: cfg.count], labels[: cfg.count]
    mc_cfg = cfg.mc_config()
    if cfg.mode == "crosscheck":
        report = validity_crosscheck(net, images, mc_cfg, cfg.bound_config())
        write_crosscheck_csv(report, _out(cfg, "crosscheck.csv"))
        fraction = "n/a" if report.pass_fraction is None else f"{report.pass_fraction:.3f}"
        print(f"eligible: {report.eligible_count}; within tolerance: {fraction}")
        return EXIT_OK
    reports = [mc_certify(net, image, mc_cfg, sample_id=index) for index, image in enumerate(images)]
    write_mc_certification_csv(reports, labels, _out(cfg, "mc_certify.csv"))
    abstained = sum(report.abstained for report in reports)
    if abstained:
        logger.warning("%d of %d samples abstained", abstained, len(reports))
    radii = [report.radius if report.predicted == label else 0.0 for report, label in zip(reports, labels)]
    print(f"abstained: {abstained}/{len(reports)}; ACR: {float(np.mean(radii)):.3f}")
    return EXIT_OK


def compare_rows(net: NetworkSpec, image: np.ndarray, cfg: RunConfig) -> List[Dict]:
    """Join the propagated trace, sampled layer moments and volume proxies by layer index."""
    bound = cfg.bound_config()
    _, trace = propagate_all(net, image, bound)
    sampled = mc_layer_moments(net, image, cfg.sigma, cfg.n, cfg.seed)
    volumes = tightness_report(net, image, bound)
    if not len(trace) == len(sampled) == len(volumes):
        raise InvariantBreach(f"layer counts differ: trace {len(trace)}, MC {len(sampled)}, IBP {len(volumes)}")
    rows = []
    for state, moments, volume in zip(trace, sampled, volumes):
        propagated = float(np.mean(np.diag(state.cov)))
        empirical = moments.mean_variance
        rows.append(
            {
                "layer_index": state.layer_index,
                "layer_kind": state.layer_kind,
                "prop_mean_variance": propagated,
                "mc_mean_variance": empirical,
                "variance_ratio": propagated / empirical if empirical > 0 else float("nan"),
                "mc_max_cross_corr": moments.max_cross_corr,
                "box_log_volume": volume["box_log_volume"],
                "cov_log_volume": volume["cov_log_volume"],
            }
        )
    return rows


def cmd_compare(cfg: RunConfig) -> int:
    _require(cfg, "model", "data")
    net = _load_model(cfg.model)
    images, _ = load_dataset(cfg.data)
    rows = compare_rows(net, images[0], cfg)
    out = _out(cfg, "compare.csv")
    write_csv_rows(out, CSV_COLUMNS["compare"], rows)
    shapes = net.shapes
    deepest = max((index for index, shape in enumerate(shapes) if shape[2] >= 2), default=None)
    if deepest is not None:
        export = empirical_gaussianity(
            net, images[0], cfg.sigma, min(cfg.n, GAUSSIANITY_SAMPLES), deepest, (0, 1), cfg.seed, cfg.rmax
        )
        write_gaussianity_csv(export, out.with_name(f"{out.stem}_gaussianity.csv"))
    ratios = [row["variance_ratio"] for row in rows]
    print(f"{len(rows)} layers compared; variance ratio at the output {ratios[-1]:.3f}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "data", *(["resume"] if cfg.resume is not None else []))
    if cfg.mode == "finetune" and cfg.resume is None:
        raise ValidationFailure("--mode finetune needs a warm start from --resume")
    images, labels = load_dataset(cfg.data)
    if cfg.noise_rate > 0:
        labels = pair_flip_labels(labels, int(labels.max()) + 1, cfg.noise_rate, cfg.seed)
    net = _load_model(cfg.resume) if cfg.resume else _default_network(images, labels, cfg.seed)
    loss_cfg = cfg.loss_config()
    if cfg.mode == "finetune":
        result = noisy_label_finetune(net, images, labels, loss_cfg, cfg.seed)
    else:
        result = train_loop(net, images, labels, loss_cfg, cfg.seed)
    checkpoint = cfg.model or Path("model.cvpr")
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.write_bytes(save(result.network))
    write_metrics_csv(result.metrics, _out(cfg, "metrics.csv"))
    final = result.metrics[-1]
    print(f"epochs: {len(result.metrics)}; clean_acc: {final.clean_acc:.3f}; ACR: {final.acr:.3f}")
    return EXIT_OK


def cmd_cost(cfg: RunConfig) -> int:
    if cfg.mode == "memory":
        if cfg.shape is None:
            raise ValidationFailure("cost --mode memory needs --shape H,W,C")
        footprint = memory_footprint(*cfg.shape)
        if cfg.out:
            write_cost_csv([footprint], _out(cfg, "memory.csv"))
        print(
            f"traditional: {footprint.traditional}; brute force: {footprint.brute_force:.0f}; "
            f"shared covariance: {footprint.shared_covariance}"
        )
        return EXIT_OK
    rows = bookkeeping_counts(cfg.kernel, cfg.depth, cfg.mode or "overlap")
    if cfg.out:
        write_cost_csv(rows, _out(cfg, "cost.csv"))
    print(format_cost_table(rows))
    return EXIT_OK


def cmd_toydata(cfg: RunConfig) -> int:
    kwargs = {"count": cfg.count} if cfg.count is not None else {}
    images, labels = make_toy_dataset(seed=cfg.seed, **kwargs)
    path = save_dataset(_out(cfg, "toy.npz"), images, labels)
    print(f"wrote {len(images)} samples to {path}")
    return EXIT_OK


def cmd_fetch_mnist(cfg: RunConfig) -> int:
    written = fetch_mnist(cfg.out or Path("mnist"))
    print("; ".join(f"{split}: {path}" for split, path in written.items()))
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    _require(cfg, "data")
    images, labels = load_dataset(cfg.data)
    split = int(round(ABLATION_TRAIN_FRACTION * len(images)))
    if split in (0, len(images)):
        raise ValidationFailure(f"{len(images)} samples are too few to hold out a test split")
    train, test = (images[:split], labels[:split]), (images[split:], labels[split:])
    seeds = [cfg.seed + offset for offset in range(ABLATION_SEED_COUNT)]
    loss_cfg = cfg.loss_config()
    if cfg.mode == "noisy":
        rate = cfg.noise_rate or ABLATION_NOISE_RATE
        noisy_cfg = loss_cfg.model_copy(update={"epochs": NOISY_FINETUNE_EPOCHS, "top_fraction": NOISY_TOP_FRACTION})
        rows = noisy_label_comparison(train, test, rate, seeds, noisy_cfg, warmup_epochs=NOISY_WARMUP_EPOCHS)
        print("; ".join(f"seed {r.seed}: naive {r.naive_acc:.3f}, fine-tuned {r.finetuned_acc:.3f}" for r in rows))
    else:
        if cfg.mode == "rmax":
            rows = rmax_sweep(train, test, ABLATION_R_GRID, seeds, loss_cfg, mc_cfg=cfg.mc_config())
        else:
            rows = lambda_sweep(train, test, sorted({0.0, cfg.lam}), seeds, loss_cfg)
        print("; ".join(f"{value:g}: {acr:.3f}" for value, acr in median_by_value(rows).items()))
    write_sweep_csv(rows, _out(cfg, f"ablate_{cfg.mode}.csv"))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "certify": cmd_certify,
    "mc-certify": cmd_mc_certify,
    "compare": cmd_compare,
    "train": cmd_train,
    "cost": cmd_cost,
    "toydata": cmd_toydata,
    "fetch-mnist": cmd_fetch_mnist,
    "ablate": cmd_ablate,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    try:
        cfg = parse_run_config(argv)
    except ValidationError as error:
        print(f"covprop: invalid arguments: {error}", file=sys.stderr)
        return EXIT_VALIDATION
    configure_logging(level=cfg.log_level)
    logger.debug("Running %s with %s", cfg.command, cfg.model_dump(exclude_none=True))
    try:
        return COMMANDS[cfg.command](cfg)
    except CovPropError as error:
        logger.error("%s: %s", type(error).__name__, error)
        return error.exit_code
    except ValidationError as error:
        logger.error("invalid configuration: %s", error)
        return EXIT_VALIDATION
    except OSError as error:
        logger.error("I/O error: %s", error)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
