"""Encrypted UDP tunnel data plane: framing, nonces, replay, key table.

Frame layout (header fields big-endian, AES-256-GCM tag last):

    "JNS1" | epoch u64 | key_id u32 | lane u16 | counter u32 | inner_len u16
    | ciphertext | tag (16)

The 24-byte header is the AEAD associated data, so any header bit flip
fails authentication. The 96-bit GCM nonce is lane u16 || prefix u48 ||
counter u32 (big-endian); the prefix is the sealer's role-specific value
derived at key exchange, which lets the receiver rebuild the exact nonce
from the header alone. Counters are per (key, lane), strictly increasing,
never reused; crossing the rekey threshold latches a rekey request while
sealing continues under the old key up to the hard limit.
"""
from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass
from enum import Enum

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AuthFailed,
    EpochTooOld,
    HandshakeRefused,
    ReplayDetected,
    UnknownKey,
    ValidationError,
)
from .handshake import SessionMaterial
from .policy import PolicyIndex

MAGIC = b"JNS1"
HEADER = struct.Struct(">4sQIHIH")  # magic, epoch, key_id, lane, counter, inner_len
HEADER_LEN = HEADER.size  # 24
TAG_LEN = 16
IP_UDP_OVERHEAD = 28  # outer IPv4 + UDP headers on the wire
DEFAULT_MTU = 1500
# 1500 - 28 (outer) - 24 (header) - 16 (tag) = 1432
DEFAULT_INNER_BUDGET = DEFAULT_MTU - IP_UDP_OVERHEAD - HEADER_LEN - TAG_LEN

COUNTER_LIMIT = 2**32 - 1
DEFAULT_REKEY_HEADROOM = 2**20
DEFAULT_REKEY_THRESHOLD = 2**32 - DEFAULT_REKEY_HEADROOM
REPLAY_WINDOW = 1024

# Session-cache lock budget; exceeding it refuses the install.
LOCK_BUDGET_S = 50e-6


def inner_budget(mtu: int) -> int:
    budget = mtu - IP_UDP_OVERHEAD - HEADER_LEN - TAG_LEN
    if budget <= 0:
        raise ValidationError(f"mtu {mtu} leaves no payload room")
    return budget


def compose_nonce(lane: int, prefix: bytes, counter: int) -> bytes:
    return struct.pack(">H", lane) + prefix + struct.pack(">I", counter)


class Verdict(Enum):
    SEALED = "sealed"
    DENY = "deny"
    KEY_PENDING = "key-pending"


@dataclass
class SealResult:
    verdict: Verdict
    frame: bytes | None = None
    rekey_required: bool = False
    cost: "PacketCost | None" = None


@dataclass
class PacketCost:
    lookup_ns: int
    crypto_ns: int
    total_ns: int


class _ReplayWindow:
    """IPsec-style sliding window: highest counter plus a seen bitmap."""

    __slots__ = ("highest", "bitmap")

    def __init__(self):
        self.highest = -1
        self.bitmap = 0

    def check(self, counter: int) -> None:
        if self.highest < 0:
            return
        if counter > self.highest:
            return
        offset = self.highest - counter
        if offset >= REPLAY_WINDOW:
            raise ReplayDetected(f"counter {counter} below window")
        if (self.bitmap >> offset) & 1:
            raise ReplayDetected(f"counter {counter} already seen")

    def update(self, counter: int) -> None:
        if counter > self.highest:
            shift = counter - self.highest if self.highest >= 0 else REPLAY_WINDOW
            self.bitmap = ((self.bitmap << shift) | 1) & ((1 << REPLAY_WINDOW) - 1)
            self.highest = counter
        else:
            self.bitmap |= 1 << (self.highest - counter)


class SessionKeyEntry:
    """One established key plus its per-lane sealing and replay state."""

    GRACE_STATES = ("active", "grace")

    def __init__(self, material: SessionMaterial, *, lanes: int,
                 rekey_threshold: int = DEFAULT_REKEY_THRESHOLD):
        if not 0 < lanes <= 0xFFFF:
            raise ValidationError(f"lane count {lanes} out of range")
        if not 0 < rekey_threshold <= COUNTER_LIMIT:
            raise ValidationError("rekey threshold out of range")
        self.material = material
        self.aead = AESGCM(bytes(material.data_key))
        self.key_id = material.key_id
        self.epoch = material.epoch
        self.lanes = lanes
        self.rekey_threshold = rekey_threshold
        self.state = "active"
        self.peer = material.peer
        # own prefix seals, peer prefix opens; both ends derived both values
        if material.role == "initiator":
            self.seal_prefix = material.initiator_prefix
            self.open_prefix = material.responder_prefix
        else:
            self.seal_prefix = material.responder_prefix
            self.open_prefix = material.initiator_prefix
        self._counters = [0] * lanes
        self._windows = [_ReplayWindow() for _ in range(lanes)]
        self._rekey_latched = False
        self.destroyed = False

    def next_counter(self, lane: int) -> tuple[int, bool]:
        """Allocate the next counter; second element is the one-shot rekey
        signal raised on crossing the threshold."""
        if not 0 <= lane < self.lanes:
            raise ValidationError(f"lane {lane} out of range")
        value = self._counters[lane]
        if value > COUNTER_LIMIT:
            raise ValidationError("nonce counter exhausted; key must rotate")
        self._counters[lane] = value + 1
        signal = False
        if value + 1 >= self.rekey_threshold and not self._rekey_latched:
            self._rekey_latched = True
            signal = True
        return value, signal

    def counter_snapshot(self) -> list[int]:
        return list(self._counters)

    def window(self, lane: int) -> _ReplayWindow:
        if not 0 <= lane < self.lanes:
            raise AuthFailed(f"lane {lane} out of range")
        return self._windows[lane]

    def destroy(self) -> None:
        self.material.destroy()
        self.state = "flushed"
        self.destroyed = True

    @property
    def key_view(self) -> bytes:
        return self.material.key_view


class FlowKeyTable:
    """Keys for every live flow, indexed for both seal and open paths.

    Seal path: (dest ip, dest port, epoch) -> entry. Open path:
    (epoch, key_id) -> entry, with the source address checked against the
    entry's bound peer, or learned from the first authenticated frame when
    the reverse endpoint was not in policy.
    """

    def __init__(self, *, lanes: int = 4,
                 rekey_threshold: int = DEFAULT_REKEY_THRESHOLD,
                 mtu: int = DEFAULT_MTU):
        self.lanes = lanes
        self.rekey_threshold = rekey_threshold
        self.inner_budget = inner_budget(mtu)
        self.policy: PolicyIndex | None = None
        self._by_flow: dict[tuple[str, int, int], SessionKeyEntry] = {}
        self._by_key: dict[tuple[int, int], SessionKeyEntry] = {}
        self._flushed_before: int = 0  # epochs strictly below this are gone
        self._lock = threading.Lock()

    # --- installation -------------------------------------------------------

    def install(self, material: SessionMaterial) -> SessionKeyEntry:
        """Install a freshly established session, replacing any active entry
        for the same flow and epoch. Subject to the lock budget."""
        if not self._lock.acquire(timeout=LOCK_BUDGET_S):
            raise HandshakeRefused("session cache lock budget exhausted")
        try:
            entry = SessionKeyEntry(material, lanes=self.lanes,
                                    rekey_threshold=self.rekey_threshold)
            if material.peer is not None:
                flow = (material.peer[0], material.peer[1], material.epoch)
                previous = self._by_flow.get(flow)
                if previous is not None:
                    self._by_key.pop((previous.epoch, previous.key_id), None)
                    previous.destroy()
                self._by_flow[flow] = entry
            self._by_key[(material.epoch, material.key_id)] = entry
            return entry
        finally:
            self._lock.release()

    def active_entry(self, ip: str, port: int, epoch: int) -> SessionKeyEntry | None:
        entry = self._by_flow.get((ip, port, epoch))
        if entry is not None and entry.state == "active":
            return entry
        return None

    def entries_for_epoch(self, epoch: int) -> list[SessionKeyEntry]:
        return [e for e in self._by_key.values() if e.epoch == epoch]

    def entry_by_key(self, epoch: int, key_id: int) -> SessionKeyEntry | None:
        return self._by_key.get((epoch, key_id))

    def drop(self, entry: SessionKeyEntry) -> None:
        with self._lock:
            self._by_key.pop((entry.epoch, entry.key_id), None)
            if entry.peer is not None:
                flow = (entry.peer[0], entry.peer[1], entry.epoch)
                if self._by_flow.get(flow) is entry:
                    del self._by_flow[flow]
            entry.destroy()

    def mark_epoch_flushed(self, epoch: int) -> None:
        if epoch >= self._flushed_before:
            self._flushed_before = epoch + 1

    @property
    def session_count(self) -> int:
        return len(self._by_key)

    def drop_all(self) -> int:
        """Destroy every live entry; used at shutdown."""
        entries = list(self._by_key.values())
        for entry in entries:
            self.drop(entry)
        return len(entries)

    # --- seal path ----------------------------------------------------------

    def seal(self, dest_ip: str, dest_port: int, inner: bytes, lane: int,
             *, epoch: int, record_cost: bool = False) -> SealResult:
        """Authorize, frame, and encrypt one inner datagram."""
        t0 = time.perf_counter_ns() if record_cost else 0
        if len(inner) > self.inner_budget:
            raise ValidationError(
                f"inner datagram {len(inner)} exceeds budget {self.inner_budget}"
            )
        policy = self.policy
        peer = policy.lookup(dest_ip, dest_port) if policy is not None else None
        t1 = time.perf_counter_ns() if record_cost else 0
        if peer is None:
            return SealResult(Verdict.DENY)
        entry = self.active_entry(dest_ip, dest_port, epoch)
        if entry is None:
            return SealResult(Verdict.KEY_PENDING)
        counter, rekey = entry.next_counter(lane)
        header = HEADER.pack(MAGIC, entry.epoch, entry.key_id, lane, counter,
                             len(inner))
        nonce = compose_nonce(lane, entry.seal_prefix, counter)
        sealed = entry.aead.encrypt(nonce, inner, header)
        t2 = time.perf_counter_ns() if record_cost else 0
        cost = None
        if record_cost:
            cost = PacketCost(lookup_ns=t1 - t0, crypto_ns=t2 - t1,
                              total_ns=t2 - t0)
        return SealResult(Verdict.SEALED, frame=header + sealed,
                          rekey_required=rekey, cost=cost)

    # --- open path ----------------------------------------------------------

    def open(self, frame: bytes, source: tuple[str, int], *,
             record_cost: bool = False):
        """Authenticate and decrypt one frame; returns (inner, entry) or
        (inner, entry, cost) when record_cost is set."""
        t0 = time.perf_counter_ns() if record_cost else 0
        if len(frame) < HEADER_LEN + TAG_LEN:
            raise AuthFailed("frame shorter than header plus tag")
        header = frame[:HEADER_LEN]
        magic, epoch, key_id, lane, counter, inner_len = HEADER.unpack(header)
        if magic != MAGIC:
            raise AuthFailed("bad frame magic")
        if len(frame) != HEADER_LEN + inner_len + TAG_LEN:
            raise AuthFailed("frame length disagrees with header")
        entry = self._by_key.get((epoch, key_id))
        t1 = time.perf_counter_ns() if record_cost else 0
        if entry is None or entry.state not in SessionKeyEntry.GRACE_STATES:
            if epoch < self._flushed_before:
                raise EpochTooOld(f"epoch {epoch} already flushed")
            raise UnknownKey(f"no key for epoch {epoch} key_id {key_id}")
        if entry.peer is not None and source != entry.peer:
            raise UnknownKey(f"key {key_id} not bound to source {source}")
        window = entry.window(lane)
        window.check(counter)
        nonce = compose_nonce(lane, entry.open_prefix, counter)
        try:
            inner = entry.aead.decrypt(nonce, frame[HEADER_LEN:], header)
        except InvalidTag as exc:
            raise AuthFailed("authentication tag rejected") from exc
        window.update(counter)
        if entry.peer is None:
            entry.peer = source  # learned from the first authenticated frame
            with self._lock:
                self._by_flow[(source[0], source[1], entry.epoch)] = entry
        t2 = time.perf_counter_ns() if record_cost else 0
        if record_cost:
            return inner, entry, PacketCost(lookup_ns=t1 - t0,
                                            crypto_ns=t2 - t1,
                                            total_ns=t2 - t0)
        return inner, entry
