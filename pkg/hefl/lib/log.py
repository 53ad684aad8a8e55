import os
import sys

from loguru import logger

from hefl.config import LoggingConfig

LOG_FORMAT = "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | <level>{level: ^9}</level> | {message}"


def setup_logging(config: LoggingConfig, logging_dir: str = None) -> str:
    """
    Replaces loguru's default sink according to ``config``.

    Returns:
        str: The active level name.
    """
    level = "TRACE" if config.trace else "DEBUG" if config.debug else "INFO"
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT, colorize=None)
    if config.record_log:
        directory = os.path.expanduser(logging_dir or config.logging_dir)
        os.makedirs(directory, exist_ok=True)
        logger.add(os.path.join(directory, "hefl.log"), level=level, format=LOG_FORMAT, rotation="25 MB", enqueue=True)
    return level
