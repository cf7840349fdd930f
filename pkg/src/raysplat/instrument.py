"""Allocation and FLOP instrumentation shared by the kernels.

Kernels never call ``np.empty`` for their working buffers directly; they ask
a :class:`ScratchArena` scope for them so that the live and peak byte counts are
known exactly. Counts are deterministic: they depend only on shapes, never on
the allocator or on timing.
"""
from __future__ import annotations

import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


class ScratchArena:
    """Tracks library-managed scratch buffers.

    Buffers are requested through a scope (``with arena.scope() as sc``) and
    count as live until that scope exits. ``peak_bytes`` is the maximum
    number of simultaneously live bytes observed; concurrent scopes from
    worker threads add up, as they would in memory.
    """

    def __init__(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0
        self._lock = threading.Lock()

    def _change(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.live_bytes)

    @contextmanager
    def scope(self) -> Iterator["Scope"]:
        sc = Scope(self)
        try:
            yield sc
        finally:
            self._change(-sc.nbytes)

    def reset(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0


class Scope:
    def __init__(self, arena: ScratchArena) -> None:
        self.arena = arena
        self.nbytes = 0

    def alloc(self, shape, dtype=np.float32) -> np.ndarray:
        arr = np.zeros(shape, dtype=dtype)
        self.record(arr.nbytes)
        return arr

    def record(self, nbytes: int) -> None:
        """Count ``nbytes`` held elsewhere (e.g. by an autograd graph) as live."""
        self.nbytes += int(nbytes)
        self.arena._change(int(nbytes))


class NullArena(ScratchArena):
    """Arena used when the caller does not ask for accounting."""

    def _change(self, nbytes: int) -> None:
        pass


@dataclass
class FlopCounter:
    """Monotone multiply-add counter, split by category.

    Categories used by the kernels: ``mlp_fw`` (forward evaluation),
    ``mlp_recompute`` (forward re-evaluation during backward), ``mlp_bw``
    (the transposed products of the backward), ``interp`` (sampling and
    splatting multiply-adds).
    """

    counts: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def add(self, category: str, multiply_adds: int) -> None:
        if multiply_adds < 0:
            raise ValueError("FLOP counts only increase")
        self.counts[category] += int(multiply_adds)

    @property
    def multiply_adds(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, category: str) -> int:
        return self.counts.get(category, 0)


class _NullCounter(FlopCounter):
    def add(self, category: str, multiply_adds: int) -> None:
        pass


NULL_FLOPS = _NullCounter()
NULL_ARENA = NullArena()
