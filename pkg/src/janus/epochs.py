"""Epoch rollover: grace periods, quiescence tracking, deferred key reclaim.

At most two epochs are ever live: the active one and, during a rollover,
its predecessor in a bounded grace period. Grace lets in-flight frames
sealed under the old keys drain while all new traffic mandates the new
epoch. Old keys are queued for deferred destruction and reclaimed when the
data plane is quiescent and no old-epoch frame has arrived for one poll
interval, or unconditionally at the grace deadline. The deferred queue is
hard-capped; hitting the cap forces an immediate reset of the stale
sessions rather than unbounded growth, trading liveness of those stale
flows for a bounded footprint.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .clock import Clock
from .dataplane import FlowKeyTable, SessionKeyEntry

DEFAULT_GRACE_CAP_MS = 500
DEFAULT_DRAIN_POLL_MS = 50
DEFAULT_QUEUE_CAP = 1024


class EpochState(Enum):
    PROVISIONED = "provisioned"
    GRACE = "grace"
    STALE_FLUSHED = "stale-flushed"


class QuiescenceTracker:
    """Per-lane progress counters used to detect that every lane has moved
    past the rollover point (or is parked idle)."""

    def __init__(self):
        self._counters: dict[int, int] = {}
        self._parked: set[int] = set()
        self.warnings = 0

    def register_lane(self, lane: int) -> None:
        self._counters.setdefault(lane, 0)

    def observe(self, lane: int) -> None:
        if lane not in self._counters:
            self.warnings += 1
            return
        self._counters[lane] += 1
        self._parked.discard(lane)

    def park(self, lane: int) -> None:
        if lane not in self._counters:
            self.warnings += 1
            return
        self._parked.add(lane)

    def snapshot(self) -> dict[int, int]:
        return dict(self._counters)

    def quiescent_since(self, snapshot: dict[int, int]) -> bool:
        for lane, then in snapshot.items():
            if lane in self._parked:
                continue
            if self._counters.get(lane, 0) <= then:
                return False
        return True


@dataclass
class GracePeriod:
    epoch: int
    started_ms: int
    deadline_ms: int
    snapshot: dict[int, int]
    entries: list[SessionKeyEntry] = field(default_factory=list)
    last_frame_ms: int = 0
    state: EpochState = EpochState.GRACE


class EpochCoordinator:
    """Drives rollovers for one node's key table."""

    def __init__(self, table: FlowKeyTable, clock: Clock, *,
                 grace_cap_ms: int = DEFAULT_GRACE_CAP_MS,
                 drain_poll_ms: int = DEFAULT_DRAIN_POLL_MS,
                 queue_cap: int = DEFAULT_QUEUE_CAP):
        self.table = table
        self.clock = clock
        self.grace_cap_ms = grace_cap_ms
        self.drain_poll_ms = drain_poll_ms
        self.queue_cap = queue_cap
        self.tracker = QuiescenceTracker()
        self.active_epoch: int | None = None
        self.grace: GracePeriod | None = None
        self.forced_resets = 0
        self.deferred_peak = 0
        self.events: list[dict] = []
        for lane in range(table.lanes):
            self.tracker.register_lane(lane)

    @property
    def live_epochs(self) -> list[int]:
        live = []
        if self.grace is not None:
            live.append(self.grace.epoch)
        if self.active_epoch is not None:
            live.append(self.active_epoch)
        return live

    def provision(self, epoch: int) -> None:
        """First epoch of a fresh node; no predecessor to retire."""
        self.active_epoch = epoch
        self._event("provisioned", epoch=epoch)

    def begin_rollover(self, new_epoch: int) -> None:
        """Make new_epoch active and move the predecessor into grace.

        A still-pending grace period is force-flushed first so no more than
        two epochs are ever live.
        """
        if self.grace is not None:
            self._flush("superseded by next rollover")
        old = self.active_epoch
        self.active_epoch = new_epoch
        self._event("rollover", epoch=new_epoch, previous=old)
        if old is None:
            return
        now = self.clock.now_ms()
        self.grace = GracePeriod(
            epoch=old,
            started_ms=now,
            deadline_ms=now + self.grace_cap_ms,
            snapshot=self.tracker.snapshot(),
            last_frame_ms=now,
        )
        for entry in self.table.entries_for_epoch(old):
            entry.state = "grace"
            self._defer(entry)

    def _defer(self, entry: SessionKeyEntry) -> None:
        grace = self.grace
        if grace is None:
            # queue already force-flushed during this rollover; the entry is
            # stale with no grace left, destroy it immediately
            self.table.drop(entry)
            return
        grace.entries.append(entry)
        self.deferred_peak = max(self.deferred_peak, len(grace.entries))
        if len(grace.entries) >= self.queue_cap:
            self.forced_resets += 1
            self._flush("deferred queue at capacity")

    def note_grace_frame(self, epoch: int) -> None:
        """Data plane reports an old-epoch frame was still draining."""
        grace = self.grace
        if grace is not None and grace.epoch == epoch:
            grace.last_frame_ms = self.clock.now_ms()

    def poll(self) -> bool:
        """Reclaim the grace epoch if it is quiescent and drained, or past
        its deadline. Returns True when a flush happened."""
        grace = self.grace
        if grace is None:
            return False
        now = self.clock.now_ms()
        if now >= grace.deadline_ms:
            self._flush("grace deadline")
            return True
        drained = (now - grace.last_frame_ms) >= self.drain_poll_ms
        if drained and self.tracker.quiescent_since(grace.snapshot):
            self._flush("quiescent and drained")
            return True
        return False

    def _flush(self, reason: str) -> None:
        grace = self.grace
        if grace is None:
            return
        for entry in grace.entries:
            self.table.drop(entry)
        self.table.mark_epoch_flushed(grace.epoch)
        grace.state = EpochState.STALE_FLUSHED
        self.grace = None
        self._event("flush", epoch=grace.epoch, reason=reason,
                    reclaimed=len(grace.entries))

    def _event(self, name: str, **detail) -> None:
        self.events.append({"event": name, "t_ms": self.clock.now_ms(), **detail})
