"""Clock abstraction so the engine can run in real time or simulated time.

Replay pacing, controller sleeps and telemetry timestamps all go through a
Clock. WallClock is the real thing; SimClock advances instantly, which keeps
scenario runs deterministic and fast.
"""

from __future__ import annotations

import time


class WallClock:
    """Monotonic wall time. sleep() really sleeps."""

    def __init__(self) -> None:
        self._origin = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._origin

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class SimClock:
    """Virtual clock. sleep() advances time without blocking."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self._now += seconds

    def advance_to(self, t: float) -> None:
        if t > self._now:
            self._now = t
