"""Utility modules."""
from src.utils.errors import IclForgeError
from src.utils.logging_utils import get_logger, configure_logging
from src.utils.rng import RngStream
from src.utils.settings import get_settings, reset_settings

__all__ = ["IclForgeError", "get_logger", "configure_logging", "RngStream", "get_settings", "reset_settings"]
