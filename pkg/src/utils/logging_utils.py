"""
Logging setup. Diagnostics go to stderr; stdout is reserved for
machine-readable command summaries.
"""
import logging
import sys

from src.utils.settings import get_settings

ROOT_LOGGER = "iclforge"
_handler = None


def configure_logging(level: str = None):
    """Attach a single stderr handler to the package logger."""
    global _handler
    logger = logging.getLogger(ROOT_LOGGER)
    if _handler is None:
        _handler = logging.StreamHandler(sys.stderr)
        _handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s [%(name)s] %(message)s"))
        logger.addHandler(_handler)
        logger.propagate = False
    else:
        # follow a replaced sys.stderr
        _handler.stream = sys.stderr
    logger.setLevel(level or get_settings().log_level)
    return logger


def get_logger(name: str) -> logging.Logger:
    """Return a logger under the package hierarchy."""
    if name.startswith("src."):
        name = name[len("src."):]
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")
