"""
settings.py
Process settings read from the environment (optionally a .env file) and the
shared logging setup.
"""

import logging
import os
from pathlib import Path

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def get_env_variable(name: str, default: str | None = None) -> str:
    """Value of ``name``; raises EnvironmentError when it is unset and no default is given."""
    value = os.getenv(name, default)
    if value is None:
        raise EnvironmentError(
            f"Required environment variable '{name}' is not set and no default value was provided."
        )
    return value


def get_thread_count(cli_value: int | None = None) -> int:
    """Worker count: the ``--threads`` flag wins, then SSVCQR_THREADS, then 1."""
    if cli_value is not None:
        return max(1, int(cli_value))
    raw = get_env_variable("SSVCQR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"Ignoring non-integer SSVCQR_THREADS={raw!r}; using 1 worker")
        return 1


def get_optional_path(name: str) -> Path | None:
    """Path-valued setting that is disabled when unset or empty; relative paths stay relative to the cwd."""
    raw = get_env_variable(name, "").strip()
    return Path(raw) if raw else None


def configure_logging(level: str | None = None) -> None:
    level_name = (level or get_env_variable("SSVCQR_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO), format=LOG_FORMAT)
