"""Logging setup on top of loguru."""
import os
import sys
from typing import Optional

from loguru import logger

LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {name}:{function} - {message}"


def configure_logging(level: Optional[str] = None) -> None:
    """Route loguru to stderr at ``level`` (or ``DESP_LOG_LEVEL``, default INFO)."""
    level = (level or os.getenv("DESP_LOG_LEVEL", "INFO")).upper()
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT)
