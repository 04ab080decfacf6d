"""
Centralized logging configuration.

Policy:
- Configure logging once per entrypoint (CLI, agent server), not at import-time.
- Level is controlled via ENGINE_LAB_LOG_LEVEL (DEBUG, INFO, ...); default INFO.
- ENGINE_LAB_LOG_FORMAT selects ``json`` (default) or ``rich``.
- Per-cycle data goes to CSV streams; the log carries events only.
"""

import logging
import os
import sys
from functools import lru_cache

from .error_service import CorrelationFilter, init_error_service


def _env_level() -> str:
    """Return desired log level from env (default: INFO)."""
    return (os.environ.get("ENGINE_LAB_LOG_LEVEL") or "INFO").upper()


def _rich_handler() -> tuple[logging.Handler, logging.Formatter]:
    from rich.logging import RichHandler

    handler = RichHandler(
        rich_tracebacks=True, markup=False, show_time=False, show_path=False
    )
    return handler, logging.Formatter("%(message)s")


@lru_cache(maxsize=1)
def setup() -> logging.Logger:
    """
    Set up JSON (python-json-logger) or Rich logging on the root logger.

    Uses @lru_cache to ensure this is only run once.
    """
    root_logger = logging.getLogger()

    # Clear any existing handlers
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    lvl_str = _env_level()
    log_level = getattr(logging, lvl_str, logging.INFO)
    root_logger.setLevel(log_level)

    fmt_pref = (os.environ.get("ENGINE_LAB_LOG_FORMAT") or "json").lower()
    handler: logging.Handler = logging.StreamHandler(sys.stderr)
    formatter: logging.Formatter
    if fmt_pref == "json":
        from pythonjsonlogger import jsonlogger

        formatter = jsonlogger.JsonFormatter(  # type: ignore[attr-defined]
            "%(asctime)s %(name)s %(levelname)s %(message)s %(correlation_id)s",
            rename_fields={
                "levelname": "level",
                "asctime": "time",
                "name": "logger",
            },
        )
    else:
        handler, formatter = _rich_handler()

    handler.setFormatter(formatter)
    handler.addFilter(CorrelationFilter())
    root_logger.addHandler(handler)

    # Initialise optional error backend (e.g., Sentry) if configured
    init_error_service()

    logger = logging.getLogger("engine_lab")
    logger.debug("Logging initialized at level %s (%s)", lvl_str, fmt_pref)

    return logger
