"""Logger configuration for implicitfilter runs."""

import logging
import sys
from pathlib import Path

from implicitfilter.constants import LOGGER_NAME

_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s.%(funcName)s | %(message)s"
_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def setup_logging(
    level: int = logging.INFO,
    log_path: Path | None = None,
    console_level: int = logging.WARNING,
) -> logging.Logger:
    """Attach a stderr handler and, unless ``log_path`` is None, a file handler.

    A second call only updates the level while handlers are attached; the CLI
    calls :func:`reset_logging` first so that every run logs into its own
    output directory.
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(level)
    if logger.handlers:
        return logger

    formatter = logging.Formatter(fmt=_FORMAT, datefmt=_DATE_FORMAT)

    console = logging.StreamHandler(sys.stderr)
    console.setLevel(console_level)
    console.setFormatter(formatter)
    logger.addHandler(console)

    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        run_log = logging.FileHandler(log_path, mode="w", encoding="utf-8")
        run_log.setLevel(level)
        run_log.setFormatter(formatter)
        logger.addHandler(run_log)

    logger.debug("Logging to %s", log_path or "stderr only")
    return logger


def reset_logging() -> None:
    """Detach and close all handlers."""
    logger = logging.getLogger(LOGGER_NAME)
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)
