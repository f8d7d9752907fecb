import functools
import math
import time

import numpy as np
from joblib import Parallel, delayed

from balweights.helpers.logger import LOGGER
from config import DEFAULT_THREADS


def resolve_threads(threads=None) -> int:
    try:
        return max(1, int(threads if threads is not None else DEFAULT_THREADS))
    except (TypeError, ValueError):
        LOGGER.error(f"Invalid thread count {threads!r}, falling back to 1")
        return 1


def run_parallel(func, items, threads=None):
    items = list(items)
    threads = min(resolve_threads(threads), max(1, len(items)))
    if threads == 1:
        return [func(item) for item in items]
    return Parallel(n_jobs=threads, backend="threading")(delayed(func)(item) for item in items)


def spawn_generators(seed, count):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def fsum_mean(values) -> float:
    values = list(values)
    if not values:
        return math.nan
    return math.fsum(values) / len(values)


def timed(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            LOGGER.info(f"{func.__name__} finished in {time.perf_counter() - start:.2f}s")
    return wrapper
