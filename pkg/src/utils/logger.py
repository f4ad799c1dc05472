import logging
import os
import sys
from pathlib import Path
from typing import Optional, Union

FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logger(log_dir: Optional[Union[str, Path]] = None, level: Optional[str] = None) -> logging.Logger:
    """Setup the package logger; safe to call more than once"""
    level_name = (level or os.getenv("TOA_SLAM_LOG_LEVEL") or "INFO").upper()
    logger = logging.getLogger("src")
    logger.setLevel(getattr(logging, level_name, logging.INFO))

    formatter = logging.Formatter(FORMAT)

    # Console handler
    if not any(getattr(h, "_toa_slam_console", False) for h in logger.handlers):
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setFormatter(formatter)
        console_handler._toa_slam_console = True
        logger.addHandler(console_handler)

    # File handler: at most one, following the latest log_dir
    log_file = None if log_dir is None else (Path(log_dir) / "toa_slam.log").resolve()
    for handler in [h for h in logger.handlers if isinstance(h, logging.FileHandler)]:
        if Path(handler.baseFilename) != log_file:
            logger.removeHandler(handler)
            handler.close()
    if log_file is not None and not any(isinstance(h, logging.FileHandler) for h in logger.handlers):
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger
