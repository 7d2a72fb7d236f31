"""
Environment settings for local runs.
Reads from .env (python-dotenv) and the process environment.
"""
import os
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

# Load environment variables
load_dotenv()


def get_env(key: str, default: Optional[str] = None) -> Optional[str]:
    """
    Get a setting from the environment.

    Args:
        key: The variable name
        default: Default value if unset or empty

    Returns:
        The value or default
    """
    value = os.getenv(key)
    if value:
        return value
    return default


class Settings(BaseModel):
    """Process-wide knobs that are not part of an experiment's identity."""
    threads: int = Field(default=1, ge=1)
    log_level: str = "INFO"
    progress: bool = True


_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get or create the global settings instance."""
    global _settings
    if _settings is None:
        _settings = Settings(
            threads=int(get_env("ICLFORGE_THREADS", "1")),
            log_level=get_env("ICLFORGE_LOG_LEVEL", "INFO").upper(),
            progress=get_env("ICLFORGE_PROGRESS", "1") not in ("0", "false", "no"),
        )
    return _settings


def reset_settings():
    """Drop the cached settings so the environment is re-read."""
    global _settings
    _settings = None
