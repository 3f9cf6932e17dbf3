"""Exact sliding-window quantiles, used as a reference for the incremental estimators."""

from __future__ import annotations

import math
from collections import deque

from sortedcontainers import SortedList


class WindowOracle:
    """Sorted multiset of the most recent ``capacity`` samples.

    Eviction is FIFO by arrival. Updates cost O(log capacity). Quantiles use
    the nearest-rank definition: the element of rank ``ceil(q * m)`` among the
    ``m`` samples currently held, rank 1 being the smallest.
    """

    def __init__(self, capacity: int):
        if int(capacity) != capacity or capacity < 1:
            raise ValueError(f"window capacity must be a positive integer, got {capacity!r}")
        self.capacity = int(capacity)
        self._sorted = SortedList()
        self._arrivals: deque[float] = deque()

    def __len__(self) -> int:
        return len(self._arrivals)

    def update(self, x: float) -> "WindowOracle":
        x = float(x)
        self._arrivals.append(x)
        self._sorted.add(x)
        if len(self._arrivals) > self.capacity:
            self._sorted.remove(self._arrivals.popleft())
        return self

    def quantile(self, q: float) -> float:
        if not self._arrivals:
            raise ValueError("quantile query on an empty window")
        if not 0.0 < q <= 1.0:
            raise ValueError(f"q must lie in (0, 1], got {q!r}")
        m = len(self._sorted)
        rank = max(1, math.ceil(q * m))
        return self._sorted[rank - 1]

    def quantiles(self, qs) -> list[float]:
        return [self.quantile(q) for q in qs]

    def window(self) -> list[float]:
        """Samples currently held, oldest first."""
        return list(self._arrivals)


def oracle_update(oracle: WindowOracle, x: float) -> WindowOracle:
    return oracle.update(x)


def oracle_quantile(oracle: WindowOracle, q: float) -> float:
    return oracle.quantile(q)
