import logging
import os
from typing import Optional

from config.paths import LOGS_DIR


def setup_logger(name: str, level: Optional[str] = None, log_filename: str = "em_toolkit.log") -> logging.Logger:
    """
    Set up and return a logger that writes logs to both the console and a file.

    Parameters
    ----------
    name : str
        Unique name for the logger instance, usually the solver module name.
    level : str, optional
        Logging level: 'DEBUG', 'INFO', 'WARNING', 'ERROR' or 'CRITICAL'.
        Defaults to the EMTOOLKIT_LOG_LEVEL environment variable, else 'INFO'.
    log_filename : str, optional
        Name of the file (inside the logs directory) where logs will be saved.

    Returns
    -------
    logging.Logger
        A configured logger instance with both file and console handlers.

    Notes
    -----
    - A logger created twice with the same name keeps its original handlers.
    - The console handler writes to stderr so that command summaries on
      stdout stay clean.
    - The logs directory comes from `config.paths.LOGS_DIR`, which honours
      EMTOOLKIT_LOGS_DIR.
    """
    logger = logging.getLogger(name)

    if logger.hasHandlers():
        return logger

    level = level or os.environ.get("EMTOOLKIT_LOG_LEVEL", "INFO")
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))

    logs_dir = os.environ.get("EMTOOLKIT_LOGS_DIR", LOGS_DIR)
    os.makedirs(logs_dir, exist_ok=True)
    log_path = os.path.join(logs_dir, log_filename)

    formatter = logging.Formatter("%(asctime)s [%(levelname)s] %(message)s")

    file_handler = logging.FileHandler(log_path)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    console_handler.setLevel(logging.WARNING)
    logger.addHandler(console_handler)

    # Keep records out of the root logger so handlers are not doubled
    logger.propagate = False

    return logger
