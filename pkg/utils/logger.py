import os
import sys
from typing import Optional

from loguru import logger

CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | "
    "<level>{level: <8}</level> | "
    "<magenta>{process.name}</magenta> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> | "
    "<level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {process.name} | {name}:{function}:{line} | {message}"

_active_level = "WARNING"


def setup_logging(debug: bool = False, log_level: str = "INFO", log_file: Optional[str] = None):
    """
    Configures loguru for PulseForge.

    Console output goes to stderr; stdout is reserved for the result paths the CLI prints.
    A rotating file sink is added only when ``log_file`` is given.
    """
    global _active_level
    _active_level = log_level
    logger.remove()
    logger.add(sys.stderr, format=CONSOLE_FORMAT, level=log_level, colorize=True,
               backtrace=debug, diagnose=debug)

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        logger.add(log_file, format=FILE_FORMAT, level=log_level, rotation="10 MB",
                   retention="7 days", compression="zip", backtrace=debug, diagnose=debug)

    logger.debug(f"Logging initialized - level={log_level}, file={log_file}, debug={debug}")


def active_level() -> str:
    return _active_level


def configure_worker(log_level: str = "WARNING"):
    """Pool initializer: realization workers log to stderr only, never to the rotating file."""
    logger.remove()
    logger.add(sys.stderr, format=CONSOLE_FORMAT, level=log_level, colorize=True)


# Quiet default until an entry point calls setup_logging
setup_logging(log_level="WARNING")

__all__ = ["logger", "setup_logging", "configure_worker", "active_level"]
