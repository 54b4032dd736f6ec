"""Nanosecond clocks: a real monotonic clock and a deterministic simulated one.

Instants and durations are plain ``int`` nanoseconds. Instants count from a
per-run epoch and must fit an unsigned 64-bit integer; arithmetic that leaves
that range raises :class:`ClockOverflow` instead of wrapping.
"""

from __future__ import annotations

import ctypes
import heapq
import itertools
import sys
import threading
import time
from typing import Callable, Optional, Protocol, runtime_checkable

U64_MAX = (1 << 64) - 1

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

DEFAULT_SPIN_WINDOW_NS = 100 * NS_PER_US


_PR_SET_TIMERSLACK = 29


def reduce_timer_slack(slack_ns: int = 1_000) -> bool:
    """Ask Linux to wake this thread's timed sleeps within ``slack_ns``.

    The default slack is 50 us, which shows up directly as sleep overshoot.
    Returns False (and changes nothing) on other platforms or on failure.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(None, use_errno=True)
        return libc.prctl(_PR_SET_TIMERSLACK, ctypes.c_ulong(slack_ns), 0, 0, 0) == 0
    except (OSError, AttributeError):
        return False


class ClockOverflow(ArithmeticError):
    """Instant arithmetic left the unsigned 64-bit range."""


class EmptyEventSet(RuntimeError):
    """advance_to_next_event() called with no pending wakeups."""


def checked_add(instant: int, duration: int) -> int:
    result = instant + duration
    if result < 0 or result > U64_MAX:
        raise ClockOverflow(f"{instant} + {duration} is outside [0, 2**64)")
    return result


def checked_sub(instant: int, duration: int) -> int:
    return checked_add(instant, -duration)


@runtime_checkable
class Clock(Protocol):
    simulated: bool

    def now(self) -> int: ...

    def sleep_until(self, deadline: int, spin: bool = True) -> int: ...


class RealClock:
    """Monotonic OS clock measured from ``epoch_ns``.

    Processes that must agree on instants share the same ``epoch_ns`` (a raw
    ``time.monotonic_ns()`` value); CLOCK_MONOTONIC is system wide.

    ``sleep_until`` sleeps coarsely until ``deadline - spin_window_ns`` and
    busy-polls the remainder.
    """

    simulated = False

    def __init__(self, epoch_ns: Optional[int] = None, spin_window_ns: int = DEFAULT_SPIN_WINDOW_NS):
        if spin_window_ns < 0:
            raise ValueError("spin_window_ns must be >= 0")
        self.epoch_ns = time.monotonic_ns() if epoch_ns is None else epoch_ns
        self.spin_window_ns = spin_window_ns

    def now(self) -> int:
        return time.monotonic_ns() - self.epoch_ns

    def sleep_until(self, deadline: int, spin: bool = True) -> int:
        """Wait until ``deadline``; ``spin=False`` skips the busy-poll phase
        and may overshoot by the OS timer slack."""
        if deadline < 0 or deadline > U64_MAX:
            raise ClockOverflow(f"deadline {deadline} outside [0, 2**64)")
        target = deadline + self.epoch_ns
        window = self.spin_window_ns if spin else 0
        coarse = target - window - time.monotonic_ns()
        if coarse > 0:
            time.sleep(coarse / NS_PER_S)
        now = time.monotonic_ns()
        while now < target:
            now = time.monotonic_ns()
        return now - self.epoch_ns

    def __repr__(self) -> str:
        return f"RealClock(epoch_ns={self.epoch_ns}, spin_window_ns={self.spin_window_ns})"


class SimulatedClock:
    """Event-driven virtual clock.

    Time only moves through :meth:`sleep_until`, :meth:`advance` and
    :meth:`advance_to_next_event`. Wakeups registered with :meth:`schedule`
    fire in (time, registration order) as time passes over them; a callback
    observes ``now()`` equal to its wakeup time.
    """

    simulated = True

    def __init__(self, start: int = 0):
        if start < 0 or start > U64_MAX:
            raise ClockOverflow(f"start {start} outside [0, 2**64)")
        self._current = start
        self._wakeups: list[tuple[int, int, Optional[Callable[[], None]]]] = []
        self._order = itertools.count()
        self._lock = threading.RLock()

    def now(self) -> int:
        return self._current

    def schedule(self, at: int, callback: Optional[Callable[[], None]] = None) -> None:
        """Register a wakeup at instant ``at`` (clamped to now)."""
        if at > U64_MAX:
            raise ClockOverflow(f"wakeup {at} outside [0, 2**64)")
        with self._lock:
            heapq.heappush(self._wakeups, (max(at, self._current), next(self._order), callback))

    def next_wakeup(self) -> Optional[int]:
        with self._lock:
            return self._wakeups[0][0] if self._wakeups else None

    @property
    def pending(self) -> int:
        return len(self._wakeups)

    def advance_to_next_event(self) -> int:
        with self._lock:
            if not self._wakeups:
                raise EmptyEventSet("no pending wakeups")
            at, _, callback = heapq.heappop(self._wakeups)
            self._current = max(self._current, at)
        if callback is not None:
            callback()
        return self._current

    def sleep_until(self, deadline: int, spin: bool = True) -> int:
        if deadline > U64_MAX:
            raise ClockOverflow(f"deadline {deadline} outside [0, 2**64)")
        while True:
            with self._lock:
                due = self._wakeups and self._wakeups[0][0] <= deadline
            if not due:
                break
            self.advance_to_next_event()
        with self._lock:
            self._current = max(self._current, deadline)
            return self._current

    def advance(self, duration: int) -> int:
        if duration < 0:
            raise ValueError("simulated time cannot move backwards")
        return self.sleep_until(checked_add(self._current, duration))

    def run_until_idle(self) -> int:
        """Fire every pending wakeup, including ones registered by callbacks."""
        while self._wakeups:
            self.advance_to_next_event()
        return self._current

    def __repr__(self) -> str:
        return f"SimulatedClock(now={self._current}, pending={len(self._wakeups)})"
