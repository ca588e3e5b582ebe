"""Injectable time sources.

Everything that waits takes a clock argument instead of calling ``time``
directly, so multi-minute lifecycles run instantly under ``VirtualClock``.
All times are milliseconds.
"""

import threading
import time


class VirtualClock:
    """Manually advanced clock; ``sleep`` returns immediately."""

    def __init__(self, start_ms=0.0):
        self._now = float(start_ms)
        self._lock = threading.Lock()

    def now_ms(self):
        with self._lock:
            return self._now

    def sleep_ms(self, ms):
        if ms < 0:
            raise ValueError("cannot sleep a negative duration")
        with self._lock:
            self._now += ms

    def sleep_until(self, t_ms):
        with self._lock:
            if t_ms > self._now:
                self._now = float(t_ms)

    @property
    def is_virtual(self):
        return True


class WallClock:
    """Monotonic wall time, zeroed at construction."""

    def __init__(self):
        self._origin = time.monotonic()

    def now_ms(self):
        return (time.monotonic() - self._origin) * 1000.0

    def sleep_ms(self, ms):
        if ms < 0:
            raise ValueError("cannot sleep a negative duration")
        time.sleep(ms / 1000.0)

    def sleep_until(self, t_ms):
        delay = t_ms - self.now_ms()
        if delay > 0:
            time.sleep(delay / 1000.0)

    @property
    def is_virtual(self):
        return False
