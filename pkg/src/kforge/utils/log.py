"""Logging setup: rich-formatted diagnostics on stderr, level taken from ``KF_LOG``."""

import logging
import os

from rich.console import Console
from rich.logging import RichHandler

ENV_VAR = "KF_LOG"
DEFAULT_LEVEL = logging.WARNING
LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

# Diagnostics never mix with documents written to stdout.
console = Console(stderr=True)


def level_from_env() -> int:
    """Reads the diagnostics level from the ``KF_LOG`` environment variable."""
    value = os.getenv(ENV_VAR, "").strip().lower()
    if not value:
        return DEFAULT_LEVEL
    if value not in LEVELS:
        logging.getLogger(__name__).warning(
            "Ignoring unknown %s value %r; using 'warn'", ENV_VAR, value
        )
        return DEFAULT_LEVEL
    return LEVELS[value]


def setup_logging(level: int | None = None) -> None:
    """Routes the ``kforge`` loggers through a single RichHandler."""
    logger = logging.getLogger("kforge")
    logger.setLevel(level_from_env() if level is None else level)
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        logger.addHandler(
            RichHandler(console=console, show_path=False, show_time=False)
        )
