import threading
import time
from collections import deque
from typing import Callable

from limits import RateLimitItemPerMinute


class SlidingWindowLimiter:
    """
    Blocks until a request fits in the trailing window. The clock and sleep
    functions are injectable so the budget can be checked on a virtual clock.

    `limits` supplies the rate item (amount and window length). Its
    MovingWindowRateLimiter storages stamp hits with `time.time()` and take no
    clock argument, so the moving-window log is kept here against `clock`;
    the eviction rule matches theirs: a hit older than one window is dropped.
    """

    def __init__(
        self,
        per_minute: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.item = RateLimitItemPerMinute(per_minute)
        self.window = float(self.item.get_expiry())
        self.clock = clock
        self.sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    @property
    def budget(self) -> int:
        return self.item.amount

    def _evict(self, now: float) -> None:
        while self._stamps and self._stamps[0] <= now - self.window:
            self._stamps.popleft()

    def acquire(self) -> float:
        while True:
            with self._lock:
                now = self.clock()
                self._evict(now)
                if len(self._stamps) < self.budget:
                    self._stamps.append(now)
                    return now
                wait = self._stamps[0] + self.window - now
            self.sleep(max(wait, 0.0))
