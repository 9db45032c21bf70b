"""Misc. utility functions used throughout the lab."""

import logging
import os

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, TypeVar

import numpy as np

from dotenv import find_dotenv, load_dotenv

load_dotenv(find_dotenv())
DEFAULT_ULAM_BINS = int(os.getenv("DEFAULT_ULAM_BINS", "4096"))
DEFAULT_CYLINDER_BINS = int(os.getenv("DEFAULT_CYLINDER_BINS", "64"))
DEFAULT_ODE_STEP = float(os.getenv("DEFAULT_ODE_STEP", "1e-3"))
DEFAULT_POWER_TOL = float(os.getenv("DEFAULT_POWER_TOL", "1e-12"))
DEFAULT_POWER_MAXITER = int(os.getenv("DEFAULT_POWER_MAXITER", "100000"))
DEFAULT_RETURN_CAP = int(os.getenv("DEFAULT_RETURN_CAP", "10000000"))
DEFAULT_BLOCK_SIZE = int(os.getenv("DEFAULT_BLOCK_SIZE", "256"))
DEFAULT_THREADS = int(os.getenv("DEFAULT_THREADS", "1"))
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "20240101"))

T = TypeVar("T")


LOG_FORMAT = "%(asctime)s %(levelname)-7s [lab:%(module)s] %(message)s"
CONSOLE_HANDLER = "lab-console"
FILE_HANDLER = "lab-file"


def get_logger(logfile: Optional[str] = None) -> logging.RootLogger:
    """Attach the lab console handler, and a file handler when asked, to the root.

    The console level comes from LAB_LOG_LEVEL (INFO by default); the file
    always records DEBUG. Calling it again does not stack handlers.

    Args:
        logfile: File to write the full log to.

    Returns:
        The root logger object.
    """
    logger = logging.getLogger()
    formatter = logging.Formatter(LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S")
    present = {h.get_name() for h in logger.handlers}

    if CONSOLE_HANDLER not in present:
        s = logging.StreamHandler()
        s.set_name(CONSOLE_HANDLER)
        s.setLevel(os.getenv("LAB_LOG_LEVEL", "INFO").upper())
        s.setFormatter(formatter)
        logger.addHandler(s)

    if logfile is not None and FILE_HANDLER not in present:
        fh = logging.FileHandler(logfile, encoding="utf-8")
        fh.set_name(FILE_HANDLER)
        fh.setLevel(logging.DEBUG)
        fh.setFormatter(formatter)
        logger.addHandler(fh)
    logger.setLevel(logging.DEBUG)

    return logger


def mod1(y: np.ndarray) -> np.ndarray:
    """Reduce values modulo one onto [0, 1).

    Results that round up to exactly 1.0 are clamped down to 0.0 so that circle
    points have a single representation.

    Args:
        y: The values to reduce.

    Returns:
        The fractional parts, in [0, 1).
    """
    r = np.asarray(y, dtype=float)
    r = r - np.floor(r)
    return np.where(r >= 1.0, 0.0, r)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Create the counter-based generator for one stream of a seeded run.

    Each stream is an independent Philox generator keyed from the master seed
    and the stream index, so parallel blocks draw the same numbers regardless
    of how they are scheduled.

    Args:
        seed: The master seed of the run.
        stream: The stream index (ensemble block, orbit index, ...).

    Returns:
        The numpy Generator for that stream.
    """
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(stream,))
    return np.random.Generator(np.random.Philox(seq))


def lq_norm(values: np.ndarray, q: float) -> float:
    """Monte Carlo L^q norm of a sample, (mean |v|^q)^(1/q).

    Args:
        values: The sampled values.
        q: The exponent, q > 0.

    Returns:
        The empirical L^q norm.
    """
    values = np.abs(np.asarray(values, dtype=float))
    if values.size == 0:
        return 0.0
    return float(np.mean(values**q) ** (1.0 / q))


def block_slices(n: int, block_size: int) -> list[slice]:
    """Split range(n) into consecutive slices of at most block_size items.

    Args:
        n: The number of items.
        block_size: The maximum block length.

    Returns:
        The list of slices, in index order.
    """
    block_size = max(1, int(block_size))
    return [slice(i, min(i + block_size, n)) for i in range(0, n, block_size)]


def map_blocks(
    func: Callable[[int, slice], T],
    n: int,
    block_size: int = DEFAULT_BLOCK_SIZE,
    threads: int = DEFAULT_THREADS,
) -> list[T]:
    """Apply func to every block of range(n), optionally on a thread pool.

    Results are returned in block order whatever the completion order, so any
    reduction over them is deterministic.

    Args:
        func: Called as func(block_index, block_slice).
        n: The number of items.
        block_size: The maximum block length.
        threads: The number of worker threads; 1 runs inline.

    Returns:
        The list of block results in index order.
    """
    slices = block_slices(n, block_size)
    if threads <= 1 or len(slices) <= 1:
        return [func(i, s) for i, s in enumerate(slices)]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(func, i, s) for i, s in enumerate(slices)]
        return [f.result() for f in futures]


def sup_norm(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-norm |x| = max_i |x_i| along an axis.

    Args:
        values: The array of vectors.
        axis: The axis holding the vector components.

    Returns:
        The array of norms.
    """
    return np.max(np.abs(values), axis=axis)
