import os
import logging
from typing import Optional
from config import LOGGING_CONFIG


def setup_logger(name: str, log_file: Optional[str] = None) -> logging.Logger:
    """
    Setup a named component logger

    Args:
        name: Logger name (one per component, e.g. 'ImplicitSolver')
        log_file: Optional file name inside the logs directory

    Returns:
        Configured logger; handlers are attached only once per name
    """
    logger = logging.getLogger(name)
    if getattr(logger, '_subdyn_configured', False):
        return logger

    log_level = getattr(logging, LOGGING_CONFIG.get('log_level', 'INFO'))
    console_level = getattr(logging, LOGGING_CONFIG.get('console_level', 'WARNING'))
    logger.setLevel(log_level)

    # Formatter
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    # File handler (skipped when the logs directory cannot be created)
    logs_dir = LOGGING_CONFIG['logs_directory']
    try:
        os.makedirs(logs_dir, exist_ok=True)
        file_handler = logging.FileHandler(
            os.path.join(logs_dir, log_file or LOGGING_CONFIG['log_file'])
        )
        file_handler.setLevel(log_level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    except OSError:
        pass

    console_handler = logging.StreamHandler()
    console_handler.setLevel(console_level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    logger._subdyn_configured = True
    return logger
