"""Scratch allocation bookkeeping for the tiled and fused strategies."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AllocationLedger:
    """Records every scratch buffer a strategy allocates during one call.

    ``peak_bytes`` is the high-water mark of live scratch; ``sizes`` keeps the
    byte size of each individual allocation in order.
    """

    live_bytes: int = 0
    peak_bytes: int = 0
    sizes: list[int] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def allocate(self, shape, dtype, label: str = "", zero: bool = False) -> np.ndarray:
        arr = np.zeros(shape, dtype=dtype) if zero else np.empty(shape, dtype=dtype)
        self.record(arr, label)
        return arr

    def record(self, arr: np.ndarray, label: str = "") -> None:
        """Account for a buffer allocated elsewhere."""
        with self._lock:
            self.live_bytes += arr.nbytes
            self.peak_bytes = max(self.peak_bytes, self.live_bytes)
            self.sizes.append(arr.nbytes)
            self.labels.append(label)

    def release(self, *arrays: np.ndarray) -> None:
        with self._lock:
            for arr in arrays:
                self.live_bytes -= arr.nbytes

    def count_at_least(self, nbytes: int) -> int:
        return sum(1 for s in self.sizes if s >= nbytes)

    @property
    def largest(self) -> int:
        return max(self.sizes, default=0)
