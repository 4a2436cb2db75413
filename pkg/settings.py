"""
Environment configuration, loaded once from .env / the process environment.
"""

import logging
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Where trained original models and cached noises are stored
CACHE_DIR = Path(os.getenv("ARU_CACHE_DIR", ".cache"))
# Default output directory when a config does not name one
RUNS_DIR = Path(os.getenv("ARU_RUNS_DIR", "runs"))
LOG_LEVEL = os.getenv("ARU_LOG_LEVEL", "INFO").upper()
SHOW_PROGRESS = os.getenv("ARU_PROGRESS", "0") == "1"


def configure_logging(level=None):
    """Configure the root logger for command-line use."""
    logging.basicConfig(
        level=getattr(logging, level or LOG_LEVEL, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
