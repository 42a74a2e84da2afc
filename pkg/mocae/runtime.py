"""
Thread-count resolution and an order-preserving parallel map.
"""

import os
from concurrent.futures import ThreadPoolExecutor

from mocae import config
from mocae.errors import ConfigError

_threads = config.DEFAULT_THREADS


def resolve_threads(flag=None):
    """
    Pick the worker count: explicit flag, else MOCAE_THREADS, else 1.

    Args:
        flag: int or None, value of --threads

    Returns:
        int >= 1
    """
    value = flag
    if value is None:
        value = os.environ.get(config.THREADS_ENV, config.DEFAULT_THREADS)
    try:
        value = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"thread count must be an integer, got {value!r}")
    if value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    return value


def configure(threads):
    global _threads
    _threads = resolve_threads(threads)
    return _threads


def get_threads():
    return _threads


def parallel_map(fn, items):
    """Map fn over items keeping input order; plain loop for a single thread."""
    items = list(items)
    if _threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=_threads) as pool:
        return list(pool.map(fn, items))
