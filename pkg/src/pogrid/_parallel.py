"""Order-preserving parallel map used for per-scenario and per-forest work."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "POGRID_THREADS"


def default_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def parallel_map(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]`` evaluated on a thread pool.

    Results come back in input order, so callers that derive every random
    stream from the item itself get thread-count-invariant output.
    """
    items = list(items)
    n = default_workers() if workers is None else max(1, int(workers))
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
