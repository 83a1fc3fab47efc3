"""High-water-mark accounting of live tensor bytes.

Every Tensor registers its buffer size on creation and deregisters it when the
last reference dies (CPython refcounting makes this deterministic; the engine
keeps its object graph cycle-free for exactly that reason). The gradient
buffers managed by the backward engine are reported here as well. Raw numpy
workspaces inside op kernels are deliberately not counted.
"""

import threading


class AllocationTracker:
    def __init__(self):
        self._lock = threading.Lock()
        self.live_bytes = 0
        self.peak_bytes = 0

    def on_alloc(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes

    def on_free(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes -= nbytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.live_bytes

    def measure(self, run) -> int:
        """Run a closure and return its peak live bytes above the entry level."""
        with self._lock:
            baseline = self.live_bytes
            self.peak_bytes = self.live_bytes
        run()
        with self._lock:
            return self.peak_bytes - baseline


GLOBAL = AllocationTracker()


def on_alloc(nbytes: int) -> None:
    GLOBAL.on_alloc(nbytes)


def on_free(nbytes: int) -> None:
    GLOBAL.on_free(nbytes)


def live_bytes() -> int:
    return GLOBAL.live_bytes
