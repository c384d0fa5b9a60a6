"""Single-threaded work scheduler with injectable clocks.

All rule code runs on one logical thread: producers (HTTP handlers, the
device simulator, timer deadlines) enqueue work onto a bounded FIFO and the
scheduler drains it in order. With a virtual clock, time only moves through
``advance``, which steps through timer deadlines deterministically.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from .errors import BadTimerArgs

INFINITE = -1


class WallClock:
    """Epoch milliseconds."""

    def now_ms(self) -> float:
        return time.time() * 1000.0


class VirtualClock:
    """Starts at zero; moves only when the scheduler advances it."""

    def __init__(self, start_ms: float = 0.0):
        self._now = start_ms

    def now_ms(self) -> float:
        return self._now

    def set(self, t_ms: float) -> None:
        if t_ms < self._now:
            raise ValueError("virtual clock cannot move backwards")
        self._now = t_ms


@dataclass(slots=True)
class Timer:
    timer_id: int
    action: Callable[[], None]
    due: float
    period: float
    remaining: int  # INFINITE or fires left
    cancelled: bool = False


@dataclass(slots=True)
class _Item:
    fn: Callable[[], object]
    done: threading.Event | None = None
    result: object = None
    error: BaseException | None = None
    enqueued_at: float = field(default=0.0)


class Scheduler:
    def __init__(self, clock=None, *, capacity: int = 100_000,
                 error_handler: Callable[[BaseException], None] | None = None):
        self.clock = clock if clock is not None else WallClock()
        self._capacity = capacity
        self._items: list[_Item] = []
        self._lock = threading.Lock()
        self._wakeup = threading.Condition(self._lock)
        self._space = threading.Condition(self._lock)
        self._timers: list[tuple[float, int, Timer]] = []
        self._timer_ids = itertools.count(1)
        self._timers_by_id: dict[int, Timer] = {}
        self._thread: threading.Thread | None = None
        self._running = False
        self._thread_id: int | None = None
        self._error_handler = error_handler

    # -- producing work --------------------------------------------------

    def submit(self, fn: Callable[[], object], *, wait: bool = False):
        """Enqueue a callable; with wait=True, block until it ran and return
        its result (re-raising its exception).

        Called from the scheduler thread itself, a waiting submit runs inline
        instead of deadlocking; likewise before the scheduler thread exists
        (inline test mode), where pending work is drained first.
        """
        if wait and threading.get_ident() == self._thread_id:
            return fn()
        if wait and self._thread is None:
            self.pump()
            return fn()
        item = _Item(fn=fn, done=threading.Event() if wait else None,
                     enqueued_at=time.perf_counter())
        with self._lock:
            while len(self._items) >= self._capacity:
                self._space.wait(timeout=1.0)
            self._items.append(item)
            self._wakeup.notify()
        if not wait:
            return None
        item.done.wait()
        if item.error is not None:
            raise item.error
        return item.result

    def queue_depth(self) -> int:
        with self._lock:
            return len(self._items)

    # -- timers ------------------------------------------------------------

    def add_timer(self, delay_ms: float, period_ms: float, count: int,
                  action: Callable[[], None]) -> int:
        if delay_ms < 0:
            raise BadTimerArgs(f"initial delay must be >= 0, got {delay_ms}")
        if period_ms <= 0:
            raise BadTimerArgs(f"period must be > 0, got {period_ms}")
        if count != INFINITE and count <= 0:
            raise BadTimerArgs(f"repeat count must be -1 or > 0, got {count}")
        timer = Timer(timer_id=next(self._timer_ids), action=action,
                      due=self.clock.now_ms() + delay_ms, period=period_ms,
                      remaining=count)
        with self._lock:
            heapq.heappush(self._timers, (timer.due, timer.timer_id, timer))
            self._timers_by_id[timer.timer_id] = timer
            self._wakeup.notify()
        return timer.timer_id

    def cancel_timer(self, timer_id: int) -> None:
        with self._lock:
            timer = self._timers_by_id.pop(timer_id, None)
            if timer is not None:
                timer.cancelled = True

    def timer_spec(self, timer_id: int) -> Timer | None:
        with self._lock:
            return self._timers_by_id.get(timer_id)

    def _pop_due_timers(self, now: float) -> list[Timer]:
        due = []
        with self._lock:
            while self._timers and self._timers[0][0] <= now:
                _, _, timer = heapq.heappop(self._timers)
                if timer.cancelled:
                    continue
                due.append(timer)
                if timer.remaining != INFINITE:
                    timer.remaining -= 1
                if timer.remaining == 0:
                    del self._timers_by_id[timer.timer_id]
                else:
                    timer.due += timer.period
                    heapq.heappush(self._timers, (timer.due, timer.timer_id, timer))
        return due

    def _next_deadline(self) -> float | None:
        with self._lock:
            while self._timers and self._timers[0][2].cancelled:
                heapq.heappop(self._timers)
            return self._timers[0][0] if self._timers else None

    # -- consuming work --------------------------------------------------------

    def _run_item(self, item: _Item) -> None:
        try:
            item.result = item.fn()
        except BaseException as exc:  # noqa: BLE001 - fault isolation per item
            item.error = exc
            if item.done is None:
                if self._error_handler is not None:
                    self._error_handler(exc)
                else:
                    raise
        finally:
            if item.done is not None:
                item.done.set()

    def _take_item(self, timeout: float | None) -> _Item | None:
        with self._lock:
            if not self._items and timeout:
                self._wakeup.wait(timeout=timeout)
            if not self._items:
                return None
            item = self._items.pop(0)
            self._space.notify()
            return item

    def pump(self) -> int:
        """Process due timer fires and queued items until idle (inline mode)."""
        self._thread_id = threading.get_ident()
        processed = 0
        while True:
            fired = False
            for timer in self._pop_due_timers(self.clock.now_ms()):
                self._run_item(_Item(fn=timer.action))
                processed += 1
                fired = True
            item = self._take_item(None)
            if item is None and not fired:
                return processed
            if item is not None:
                self._run_item(item)
                processed += 1

    def advance(self, ms: float) -> int:
        """Virtual clocks only: move time forward, firing timers in deadline
        order and draining the queue at every step."""
        if not isinstance(self.clock, VirtualClock):
            raise RuntimeError("advance requires a virtual clock")
        target = self.clock.now_ms() + ms
        processed = self.pump()
        while True:
            deadline = self._next_deadline()
            if deadline is None or deadline > target:
                break
            self.clock.set(deadline)
            processed += self.pump()
        self.clock.set(target)
        return processed + self.pump()

    # -- threaded mode ------------------------------------------------------------

    def start(self) -> None:
        if self._thread is not None:
            return
        self._running = True
        self._thread = threading.Thread(target=self._loop, name="rule-scheduler",
                                        daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._running = False
        with self._lock:
            self._wakeup.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None

    def _loop(self) -> None:
        self._thread_id = threading.get_ident()
        while self._running:
            now = self.clock.now_ms()
            for timer in self._pop_due_timers(now):
                self._run_item(_Item(fn=timer.action))
            deadline = self._next_deadline()
            if isinstance(self.clock, VirtualClock):
                timeout = 0.05  # virtual time moves via advance submissions
            elif deadline is None:
                timeout = 0.2
            else:
                timeout = min(max((deadline - self.clock.now_ms()) / 1000.0, 0.0), 0.2)
            item = self._take_item(timeout if timeout > 0 else 0.001)
            if item is not None:
                self._run_item(item)
