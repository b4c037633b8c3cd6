import os
import logging
from datetime import datetime
from typing import Optional

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(message)s'


def setup_logging(log_dir: str = "logs", command: str = "run", level: int = logging.INFO,
                  console_level: Optional[int] = None) -> str:
    """Log to ``<log_dir>/acz_<command>_<timestamp>.log`` and to stderr.

    numpy and scipy warnings (overflow in a fit, ill-conditioned covariance)
    are routed into the same log. Returns the log file path.
    """
    os.makedirs(log_dir, exist_ok=True)
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    log_file = os.path.join(log_dir, f"acz_{command.replace('-', '_')}_{timestamp}.log")

    console = logging.StreamHandler()
    console.setLevel(console_level if console_level is not None else level)
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[logging.FileHandler(log_file), console],
        force=True
    )
    logging.captureWarnings(True)
    logging.info(f"Logging {command} to {log_file}")
    return log_file
