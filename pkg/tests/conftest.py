"""Pytest fixtures: session logging, seeded networks and datasets, and the HTTP service process."""

import logging
import os
import subprocess
import threading
import time
from pathlib import Path
from typing import Generator, Optional

import numpy as np
import pytest
import requests

from constants.common import APP_PROTOCOL
from covprop.data import make_toy_dataset
from covprop.network import build_linear, build_toy_convnet, save
from covprop.numkit import seeded_rng
from covprop.train import train_loop
from models.configs import LossConfig
from models.network import AvgPoolLayer, ConvLayer, FlattenLayer, LinearLayer, NetworkSpec, ReLULayer
from utils import logging_config
from utils.app_helpers import find_free_tcp_port, terminate_process, wait_for_server_response

SHUTDOWN_TIMEOUT_SEC: int = 5
DATA_DIR = Path(__file__).parent / "data"


### Pytest command-line options and session-wide logging ###
def pytest_addoption(parser):
    parser.addoption(
        "--source",
        help="Base URL of an already running certification service. If omitted an internal one is started.",
    )


def pytest_configure(config):
    """Configure the root logger once for the test session."""
    console_level = config.option.log_level or "INFO"
    logging_config.configure_logging(level=console_level, enable_console=True)
    logging.getLogger(__name__).info("Test session started with log level: %s", console_level)
    os.environ["COVPROP_LOG_LEVEL"] = console_level


### Builders shared by several modules ###
def random_convnet(seed: int, shape=(6, 6, 1), classes: int = 3) -> NetworkSpec:
    """Two conv layers and two linear layers with non-zero biases."""
    rng = seeded_rng(seed)
    height, width, channels = shape

    def conv(in_channels: int, out_channels: int) -> ConvLayer:
        return ConvLayer(
            in_channels=in_channels,
            out_channels=out_channels,
            kernel=3,
            padding=1,
            weights=rng.standard_normal((9 * in_channels, out_channels)) * 0.5,
            bias=rng.standard_normal(out_channels) * 0.1,
        )

    def linear(in_dim: int, out_dim: int) -> LinearLayer:
        return LinearLayer(
            in_dim=in_dim,
            out_dim=out_dim,
            weights=rng.standard_normal((in_dim, out_dim)) * 0.5,
            bias=rng.standard_normal(out_dim) * 0.1,
        )

    flat = (height // 2) * (width // 2) * 2
    layers = [
        conv(channels, 2),
        ReLULayer(),
        AvgPoolLayer(kernel=2),
        conv(2, 2),
        ReLULayer(),
        FlattenLayer(),
        linear(flat, 5),
        ReLULayer(),
        linear(5, classes),
    ]
    return NetworkSpec(input_shape=shape, layers=layers, class_count=classes)


### Fixtures ###
@pytest.fixture
def rng() -> np.random.Generator:
    return seeded_rng(1234)


@pytest.fixture(scope="session")
def toy_dataset():
    return make_toy_dataset(count=48, seed=0)


@pytest.fixture(scope="session")
def toy_convnet(toy_dataset) -> NetworkSpec:
    images, _ = toy_dataset
    return build_toy_convnet(tuple(images.shape[1:]), 4, seed=0)


@pytest.fixture(scope="session")
def linear_net() -> NetworkSpec:
    return build_linear((2, 2, 1), 3, hidden=(4,), seed=3)


@pytest.fixture(scope="session")
def trained_toy_net(toy_dataset) -> NetworkSpec:
    """Toy convnet trained with classification loss only; cached for the whole session."""
    images, labels = toy_dataset
    net = build_toy_convnet(tuple(images.shape[1:]), 4, seed=0)
    cfg = LossConfig(lam=0.0, sigma=0.25, epochs=6, batch_size=8, lr_schedule=[(0, 0.05)])
    return train_loop(net, images, labels, cfg, seed=0).network


@pytest.fixture(scope="session")
def trained_toy_model_file(tmp_path_factory, trained_toy_net) -> Path:
    path = tmp_path_factory.mktemp("models") / "toy.cvpr"
    path.write_bytes(save(trained_toy_net))
    return path


@pytest.fixture(scope="session")
def golden_linear_bytes() -> bytes:
    return (DATA_DIR / "golden_linear.cvpr").read_bytes()


### API client with base_url awareness and logging ###
class APIClient(requests.Session):
    """requests.Session that prefixes relative URLs with ``base_url`` and logs every call at DEBUG."""

    def __init__(self, base_url: str):
        super().__init__()
        self.base_url = base_url.rstrip("/")

    def request(self, method, url, *args, **kwargs):
        if url.startswith("/"):
            url = self.base_url + url
        start_time = time.perf_counter()
        logging.debug("HTTP %-6s %s", method.upper(), url)
        response = super().request(method, url, *args, **kwargs)
        logging.debug("-> %s in %.1f ms", response.status_code, (time.perf_counter() - start_time) * 1_000)
        return response


### Internal certification service (spawned when `--source` is not supplied) ###
@pytest.fixture(scope="session")
def internal_service(request) -> Generator[Optional[str], None, None]:
    if request.config.getoption("--source"):
        yield None
        return

    port, host = find_free_tcp_port()
    base_url = f"{APP_PROTOCOL}://{host}:{port}"
    logging.info("Starting internal certification service on %s", base_url)
    process = subprocess.Popen(
        ["uvicorn", "app.main:app", "--port", port, "--host", host],
        env=os.environ | {"COVPROP_LOG_LEVEL": os.environ.get("COVPROP_LOG_LEVEL", "INFO")},
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
        bufsize=1,
    )

    def log_service_output():
        for line in iter(process.stdout.readline, ""):
            logging.debug("Service output: %s", line.strip())

    threading.Thread(target=log_service_output, daemon=True).start()

    try:
        wait_for_server_response(base_url)
    except RuntimeError:
        terminate_process(process, SHUTDOWN_TIMEOUT_SEC)
        raise
    yield base_url

    logging.debug("Shutting down internal certification service ...")
    terminate_process(process, SHUTDOWN_TIMEOUT_SEC)


@pytest.fixture(scope="session")
def base_url(request, internal_service) -> str:
    return request.config.getoption("--source") or internal_service


@pytest.fixture(scope="session")
def client(base_url) -> Generator[APIClient, None, None]:
    session_client = APIClient(base_url)
    yield session_client
    session_client.close()
