"""Byte accounting for buffers the head allocates while it executes.

Execution strategies differ mainly in how much intermediate memory they
materialize. The tracker records a high-water mark over the buffers a
strategy allocates through it (caller-provided inputs and returned outputs
are excluded by construction), plus the bytes a forward pass retains for
its backward pass. An optional byte cap lets out-of-memory behavior be
exercised deterministically at desk scale.
"""

from __future__ import annotations

import threading

import numpy as np


class AllocationCapExceeded(RuntimeError):
    """A tracked allocation would push live bytes over the configured cap."""

    def __init__(self, requested: int, live: int, cap: int):
        super().__init__(
            f"allocating {requested} bytes would raise live bytes to "
            f"{live + requested}, over the cap of {cap}"
        )
        self.requested = requested
        self.live = live
        self.cap = cap


class AllocTracker:
    """High-water-mark accounting of head-owned scratch and saved buffers."""

    def __init__(self, cap_bytes: int | None = None):
        if cap_bytes is not None and cap_bytes < 0:
            raise ValueError(f"cap_bytes must be nonnegative, got {cap_bytes}")
        self.cap_bytes = cap_bytes
        self.current_bytes = 0
        self.peak_bytes = 0
        self.saved_bytes = 0
        self._lock = threading.Lock()

    def allocate(self, shape, dtype=np.float32, *, zero: bool = True) -> np.ndarray:
        nbytes = int(np.dtype(dtype).itemsize) * int(np.prod(shape, dtype=object))
        with self._lock:
            if self.cap_bytes is not None and self.current_bytes + nbytes > self.cap_bytes:
                raise AllocationCapExceeded(nbytes, self.current_bytes, self.cap_bytes)
            self.current_bytes += nbytes
            if self.current_bytes > self.peak_bytes:
                self.peak_bytes = self.current_bytes
        return np.zeros(shape, dtype) if zero else np.empty(shape, dtype)

    def release(self, arr: np.ndarray) -> None:
        with self._lock:
            self.current_bytes -= arr.nbytes

    def note_saved(self, nbytes: int) -> None:
        """Record bytes retained between forward and backward."""
        with self._lock:
            self.saved_bytes += int(nbytes)
