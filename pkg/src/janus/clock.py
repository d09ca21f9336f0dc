"""Injectable time source.

Everything that reads time takes a Clock so the same code runs against wall
time in live tunnels and against virtual time in simulations and unit tests.
Timestamps are integer milliseconds since the clock's own epoch (process
start for wall clocks, zero for simulated ones).
"""
from __future__ import annotations

import os
import time


class Clock:
    def now_ms(self) -> int:
        raise NotImplementedError

    def sleep_ms(self, duration_ms: float) -> None:
        raise NotImplementedError


class WallClock(Clock):
    """Monotonic wall time, rebased so now_ms() == 0 at construction."""

    def __init__(self):
        self._origin_ns = time.monotonic_ns()

    def now_ms(self) -> int:
        return (time.monotonic_ns() - self._origin_ns) // 1_000_000

    def sleep_ms(self, duration_ms: float) -> None:
        if duration_ms > 0:
            time.sleep(duration_ms / 1000.0)


class SimClock(Clock):
    """Virtual time: advances only when told to. sleep_ms() advances it."""

    def __init__(self, start_ms: int = 0):
        self._now_ms = int(start_ms)

    def now_ms(self) -> int:
        return self._now_ms

    def advance_ms(self, delta_ms: float) -> None:
        if delta_ms < 0:
            raise ValueError("clock cannot move backwards")
        self._now_ms += int(delta_ms)

    def sleep_ms(self, duration_ms: float) -> None:
        self.advance_ms(duration_ms)


def clock_from_env(default: str = "wall") -> Clock:
    """Build a clock from JANUS_CLOCK (``sim`` or ``wall``)."""
    mode = os.environ.get("JANUS_CLOCK", default).strip().lower()
    if mode == "sim":
        return SimClock()
    if mode == "wall":
        return WallClock()
    raise ValueError(f"JANUS_CLOCK must be 'sim' or 'wall', got {mode!r}")
