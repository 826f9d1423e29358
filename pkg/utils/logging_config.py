"""Root logger setup shared by the CLI, the certification service and the test session."""

import logging
import sys
from datetime import datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional, Union

PROJECT_ROOT = Path(__file__).parent.parent
LOG_DIR = PROJECT_ROOT / "logs"

LOG_MESSAGE_FORMAT = "%(asctime)s [%(levelname)8s] %(name)s: %(message)s"
LOG_TIME_FORMAT = "%H:%M:%S"
LOG_FILE_MAX_BYTES = 10_000_000
LOG_FILE_BACKUPS = 5


class _ColourFormatter(logging.Formatter):
    """Colours the level name on the console only."""

    COLOURS = {"DEBUG": 37, "INFO": 36, "WARNING": 33, "ERROR": 31, "CRITICAL": 41}
    RESET = "\033[0m"

    def format(self, record: logging.LogRecord) -> str:
        plain = record.levelname
        colour = self.COLOURS.get(plain)
        if colour:
            record.levelname = f"\033[{colour}m{plain}{self.RESET}"
        try:
            return super().format(record)
        finally:
            record.levelname = plain


def default_logfile(prefix: str = "covprop") -> Path:
    return LOG_DIR / f"{prefix}_{datetime.now().strftime('%Y-%m-%d_%H-%M-%S')}.log"


def configure_logging(
    *,
    level: str = "INFO",
    logfile_path: Optional[Union[str, Path]] = None,
    enable_console: bool = True,
) -> None:
    """Configure the root logger once; later calls only adjust the level.

    Arguments
    ---------
    level         : Root log level name (e.g. "DEBUG", "INFO").
    logfile_path  : Rotating log file. Defaults to ``logs/covprop_<timestamp>.log``.
    enable_console: Attach a colourised handler on stdout.

    Raises
    ------
    OSError: The log directory or file cannot be created.
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(level.upper())
    if root_logger.handlers:
        return

    logfile = Path(logfile_path) if logfile_path else default_logfile()
    try:
        logfile.parent.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            filename=str(logfile), maxBytes=LOG_FILE_MAX_BYTES, backupCount=LOG_FILE_BACKUPS, encoding="utf-8"
        )
    except OSError as error:
        raise OSError(f"Cannot create log file at {logfile}: {error}") from error
    file_handler.setFormatter(logging.Formatter(fmt=LOG_MESSAGE_FORMAT, datefmt=LOG_TIME_FORMAT))
    root_logger.addHandler(file_handler)

    if enable_console:
        console_handler = logging.StreamHandler(stream=sys.stdout)
        console_handler.setFormatter(_ColourFormatter(fmt=LOG_MESSAGE_FORMAT, datefmt=LOG_TIME_FORMAT))
        root_logger.addHandler(console_handler)

    logging.captureWarnings(True)
    logging.getLogger(__name__).info("Logging configured, writing to %s", logfile)
