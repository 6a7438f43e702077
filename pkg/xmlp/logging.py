"""
The `xmlp` package logger: the chosen level and up to stdout, everything to
`<out>/xmlp.log`.
"""
import logging
import logging.handlers
import sys
from pathlib import Path

from .errors import ConfigError

LOGGER_NAME = 'xmlp'
STDOUT_FORMAT = '%(asctime)s [%(levelname)s] %(message)s'
FILE_FORMAT = '%(asctime)s %(name)s %(threadName)s [%(levelname)s] %(message)s'

# Resumed runs keep appending to the same file.
MAX_LOG_BYTES = 64 * 1024 * 1024


def parse_level(name: str) -> int:
    level = logging.getLevelName(name.upper())
    if not isinstance(level, int):
        raise ConfigError(f"unknown log level {name!r}")
    return level


def configure_logger(workdir: Path, log_level: str = 'INFO') -> logging.Logger:
    """Replace any handlers from an earlier command in this process."""
    level = parse_level(log_level)
    logger = get_logger()
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    sh = logging.StreamHandler(sys.stdout)
    sh.setLevel(level)
    sh.setFormatter(logging.Formatter(STDOUT_FORMAT))

    filehandler = logging.handlers.RotatingFileHandler(
        Path(workdir) / "xmlp.log", maxBytes=MAX_LOG_BYTES, backupCount=2)
    filehandler.setLevel(logging.DEBUG)
    filehandler.setFormatter(logging.Formatter(FILE_FORMAT))

    logger.addHandler(sh)
    logger.addHandler(filehandler)
    logger.setLevel(logging.DEBUG)
    return logger


def get_logger() -> logging.Logger:
    return logging.getLogger(LOGGER_NAME)
