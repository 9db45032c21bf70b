#!/usr/bin/env python
"""Main lab script."""
import os
import sys

from dotenv import load_dotenv

from averaging.cli import main
from averaging.utils.utils import get_logger

__version__ = "0.1.0-dev"


# LOADS THE .ENV FILE THAT RESIDES ON THE SAME LEVEL AS THE SCRIPT.
load_dotenv()

logger = get_logger(logfile=os.getenv("LAB_LOGFILE"))
logger.info(f"Starting averaging lab {__version__}...")

sys.exit(main())
