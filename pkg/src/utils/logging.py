"""
Logging configuration for the fiber segmentation toolkit
"""
import sys
from pathlib import Path
from typing import Optional

from loguru import logger


def setup_logging(log_level: str = "INFO", log_format: str = "text", log_dir: Optional[str] = None):
    """
    Configure loguru for command-line runs

    Console output goes to stderr so stdout only carries report lines.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR)
        log_format: Format type (text or json)
        log_dir: Directory for daily rotating log files; None or "" disables them
    """
    # Remove default handler
    logger.remove()

    if log_format == "json":
        logger.add(sys.stderr, serialize=True, level=log_level)
    else:
        logger.add(
            sys.stderr,
            format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>",
            level=log_level,
            colorize=True
        )

    if log_dir:
        path = Path(log_dir)
        path.mkdir(parents=True, exist_ok=True)
        logger.add(
            path / "fiberseg-{time:YYYY-MM-DD}.log",
            rotation="00:00",
            retention="30 days",
            compression="zip",
            level=log_level
        )

    return logger
