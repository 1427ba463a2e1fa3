import threading
import time


class TokenBucket:
    """Byte-rate limiter with no burst allowance.

    Each ``acquire(n)`` reserves the next ``n / rate`` seconds of link time and
    returns once that slot has elapsed, so a transfer of N bytes takes N / rate
    seconds however it is chunked. Idle time does not accumulate credit.
    """

    def __init__(self, bytes_per_second, clock=time.monotonic, sleep=time.sleep):
        if bytes_per_second <= 0:
            raise ValueError(f"bytes_per_second must be positive, got {bytes_per_second}")
        self.rate = float(bytes_per_second)
        self._clock = clock
        self._sleep = sleep
        self._next = clock()
        self._lock = threading.Lock()

    def acquire(self, n_bytes):
        with self._lock:
            now = self._clock()
            self._next = max(now, self._next) + n_bytes / self.rate
            wait = self._next - now
        if wait > 0:
            self._sleep(wait)
