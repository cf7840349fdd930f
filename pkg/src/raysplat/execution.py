"""Ray chunking and the reduction contract for shared accumulators.

Work is split into contiguous chunks of rays. With one thread, chunks run
in ray order and write straight into the shared accumulators. With several
threads each chunk fills private accumulators that are merged either in
chunk order (``deterministic=True``) or in completion order under a lock
(fast mode, whose float sums depend on scheduling).
"""
from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, TypeVar

T = TypeVar("T")


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("LIGHTPLANE_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class ExecConfig:
    chunk_rays: int = 4096
    threads: int = field(default_factory=default_threads)
    deterministic: bool = True


def chunk_slices(n: int, size: int) -> list[slice]:
    size = max(1, int(size))
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def run_chunks(slices: list[slice], work: Callable[[slice, T], None],
               shared: T, make_private: Callable[[], T],
               merge: Callable[[T, T], None], cfg: ExecConfig) -> T:
    """Run ``work(chunk, accumulators)`` over all chunks and reduce into ``shared``."""
    if cfg.threads <= 1 or len(slices) <= 1:
        for s in slices:
            work(s, shared)
        return shared

    def task(s: slice) -> T:
        acc = make_private()
        work(s, acc)
        return acc

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        if cfg.deterministic:
            for acc in pool.map(task, slices):
                merge(shared, acc)
        else:
            lock = threading.Lock()
            futures = [pool.submit(task, s) for s in slices]
            for fut in as_completed(futures):
                with lock:
                    merge(shared, fut.result())
    return shared
