"""Process, port and retry helpers shared by the service tests and the MNIST fetcher."""

import contextlib
import logging
import os
import socket
import subprocess
import time
from typing import Callable, Final, Optional, Tuple, Type, TypeVar

import requests

logger = logging.getLogger(__name__)

T = TypeVar("T")

MAX_ATTEMPTS: Final[int] = 20
SLEEP_INTERVAL_SEC: Final[float] = 0.5
CONTAINER_IP: Final[str] = "0.0.0.0"
LOCALHOST_IP: Final[str] = "127.0.0.1"


def find_free_tcp_port() -> Tuple[str, str]:
    """Let the OS pick an unused TCP port; binds all interfaces inside Docker, localhost otherwise."""
    host = CONTAINER_IP if os.environ.get("DOCKER_CONTAINER") else LOCALHOST_IP
    with contextlib.closing(socket.socket()) as probe:
        probe.bind((host, 0))
        port = probe.getsockname()[1]
    logger.debug("Found free TCP port %d on %s", port, host)
    return str(port), host


def wait_for_server_response(base_url: str, endpoint: str = "/health") -> None:
    """Poll ``base_url + endpoint`` until the service answers; raise ``RuntimeError`` after ``MAX_ATTEMPTS``."""
    url = base_url.rstrip("/") + endpoint
    last_error: Optional[str] = None
    for attempt in range(1, MAX_ATTEMPTS + 1):
        logger.debug("Attempt %d: waiting for %s", attempt, url)
        try:
            requests.get(url, timeout=2)
            logger.info("Service answering on %s", url)
            return
        except requests.RequestException as error:
            last_error = str(error)
            time.sleep(SLEEP_INTERVAL_SEC)
    raise RuntimeError(f"Service did not start on {url}. Last error: {last_error}")


def terminate_process(process: "subprocess.Popen", timeout: int) -> None:
    process.terminate()
    try:
        process.wait(timeout=timeout)
    except subprocess.TimeoutExpired:
        logger.warning("Process %d did not terminate in %ds, killing it", process.pid, timeout)
        process.kill()


def retry_with_backoff(
    operation: Callable[[], T],
    max_attempts: int = 3,
    initial_delay: float = 1.0,
    exception_types: Tuple[Type[BaseException], ...] = (Exception,),
    description: Optional[str] = None,
) -> T:
    """Run ``operation`` up to ``max_attempts`` times, doubling the delay after each failure.

    Only ``exception_types`` trigger a retry; the last one is re-raised once
    the attempts are used up.
    """
    name = description or getattr(operation, "__name__", "operation")
    delay = initial_delay
    for attempt in range(1, max_attempts + 1):
        try:
            return operation()
        except exception_types as error:
            if attempt == max_attempts:
                logger.warning("%s failed after %d attempts: %s", name, max_attempts, error)
                raise
            logger.debug("%s failed (attempt %d/%d), retrying in %.1fs: %s", name, attempt, max_attempts, delay, error)
            time.sleep(delay)
            delay *= 2
    raise ValueError(f"max_attempts must be positive, got {max_attempts}")
