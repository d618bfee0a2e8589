"""Process-wide knobs: thread cap for embarrassingly parallel sweeps.

IFF_THREADS caps worker threads (default: hardware count). Results are
always gathered in submission order, so parallel runs stay deterministic.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    raw = os.environ.get("IFF_THREADS", "").strip()
    if raw:
        try:
            value = int(raw)
        except ValueError as exc:
            raise ValueError(f"IFF_THREADS must be an integer, got {raw!r}") from exc
        return max(1, value)
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Order-preserving map, threaded when IFF_THREADS allows it."""
    workers = min(thread_count(), len(items)) if items else 1
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
