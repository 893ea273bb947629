"""Virtual and wall clocks behind one interface.

The virtual clock makes overlap timing a pure computation: the driver advances
it explicitly and storage completion times are scheduled arithmetic, so a run
is deterministic down to the last event. The wall clock exists to exercise the
same engine against real file I/O, where only correctness claims hold.
"""

from __future__ import annotations

import time


class VirtualClock:
    """Discrete-event time. Only the driver moves it, only forward."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError(f"cannot advance by {dt}")
        self._now += dt
        return self._now

    def advance_to(self, t: float) -> float:
        # Waiting on an already-passed completion is a no-op, not an error.
        if t > self._now:
            self._now = t
        return self._now

    @property
    def is_virtual(self) -> bool:
        return True


class WallClock:
    """Monotonic real time, zeroed at construction."""

    def __init__(self) -> None:
        self._t0 = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._t0

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError(f"cannot advance by {dt}")
        if dt > 0:
            time.sleep(dt)
        return self.now()

    def advance_to(self, t: float) -> float:
        remaining = t - self.now()
        if remaining > 0:
            time.sleep(remaining)
        return self.now()

    @property
    def is_virtual(self) -> bool:
        return False
