"""Thread fan-out for nogil kernels; results are always returned in task order."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("PLUMEDIAL_THREADS", "1"))
    if threads < 1:
        raise ValueError("thread count must be >= 1")
    return threads


def run_tasks(fn: Callable[[T], R], tasks: Iterable[T], threads: int | None = None) -> list[R]:
    tasks = list(tasks)
    n = min(resolve_threads(threads), max(len(tasks), 1))
    if n == 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, tasks))
