"""Simulated TEE attestation: runtime registers, reports, quotes, collateral.

This models the attestation flow of a TDX-style confidential VM closely
enough to drive the key exchange: extend-only SHA-384 register chains, a
64-byte report_data binding slot, a per-host quoting enclave that signs
reports with a shared authority key and serializes requests FIFO, and
DCAP-style verification collateral with revocation and a freshness bound.
No real hardware is involved; the authority key stands in for the quoting
infrastructure's certificate chain.
"""
from __future__ import annotations

import hashlib
import json
import struct
import threading
from collections import deque
from dataclasses import dataclass
from random import Random
from typing import Callable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519

from .clock import Clock, SimClock
from .errors import (
    CollateralStale,
    MeasurementMismatch,
    RefreshFailed,
    Revoked,
    Rtmr3Mismatch,
    SignatureInvalid,
    ValidationError,
)

DIGEST_LEN = 48
REPORT_DATA_LEN = 64
ZERO_DIGEST = b"\x00" * DIGEST_LEN

# Fixed marker extended into RTMR3 when the filter lock is engaged, so a
# locked and an unlocked boot can never share a register value.
BPF_LOCK_MARKER = hashlib.sha384(b"janus/bpf-lock/v1").digest()

DEFAULT_COLLATERAL_MAX_AGE_MS = 90_000
DEFAULT_REFRESH_INTERVAL_MS = 60_000


def extend_digest(current: bytes, measurement: bytes) -> bytes:
    """One extend step: SHA-384 over the old value followed by the input."""
    return hashlib.sha384(current + measurement).digest()


class MeasurementRegisters:
    """Four extend-only 48-byte runtime registers plus the filter-lock flag."""

    def __init__(self):
        self.rtmr = [ZERO_DIGEST] * 4
        self.bpf_lock_engaged = False
        self.sealed = False

    def extend(self, index: int, measurement: bytes) -> bytes:
        if not 0 <= index < 4:
            raise ValidationError(f"register index {index} out of range")
        if len(measurement) != DIGEST_LEN:
            raise ValidationError("extend input must be 48 bytes")
        if self.sealed:
            raise ValidationError("registers are sealed")
        self.rtmr[index] = extend_digest(self.rtmr[index], measurement)
        return self.rtmr[index]

    def engage_bpf_lock(self) -> bytes:
        """Extend RTMR3 with the lock marker. Permitted exactly once."""
        if self.bpf_lock_engaged:
            raise ValidationError("filter lock already engaged")
        digest = self.extend(3, BPF_LOCK_MARKER)
        self.bpf_lock_engaged = True
        return digest

    def seal(self) -> None:
        self.sealed = True


def bind_report_data(items: Sequence[bytes]) -> bytes:
    """64-byte binding slot: SHA-384 over the length-prefixed items, padded.

    Each item is prefixed with its u32 little-endian length; the 48-byte
    digest is right-padded with 16 zero bytes. Length prefixes make the
    encoding injective, so distinct item tuples cannot collide by
    concatenation.
    """
    if not items:
        raise ValidationError("report data binding needs at least one item")
    h = hashlib.sha384()
    for item in items:
        h.update(struct.pack("<I", len(item)))
        h.update(item)
    return h.digest() + b"\x00" * 16


@dataclass(frozen=True)
class TdReport:
    measurement: bytes
    rtmr: tuple[bytes, bytes, bytes, bytes]
    report_data: bytes

    def __post_init__(self):
        if len(self.measurement) != DIGEST_LEN:
            raise ValidationError("measurement must be 48 bytes")
        if len(self.rtmr) != 4 or any(len(r) != DIGEST_LEN for r in self.rtmr):
            raise ValidationError("need four 48-byte registers")
        if len(self.report_data) != REPORT_DATA_LEN:
            raise ValidationError("report_data must be 64 bytes")

    def canonical_bytes(self) -> bytes:
        return self.measurement + b"".join(self.rtmr) + self.report_data


def generate_report(registers: MeasurementRegisters, measurement: bytes,
                    report_data: bytes) -> TdReport:
    return TdReport(
        measurement=measurement,
        rtmr=tuple(registers.rtmr),
        report_data=report_data,
    )


_REPORT_LEN = DIGEST_LEN * 5 + REPORT_DATA_LEN  # 304
QUOTE_LEN = _REPORT_LEN + 8 + 64  # + collateral_id u64 + Ed25519 signature


def quote_signing_payload(report: "TdReport", collateral_id: int) -> bytes:
    """Everything the quote signature covers: the report plus the collateral
    pin. Leaving the pin outside the signature would let an in-path party
    rewrite it undetected."""
    return report.canonical_bytes() + struct.pack("<Q", collateral_id)


@dataclass(frozen=True)
class AttestationQuote:
    report: TdReport
    collateral_id: int
    signature: bytes

    def to_bytes(self) -> bytes:
        return (self.report.canonical_bytes()
                + struct.pack("<Q", self.collateral_id)
                + self.signature)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AttestationQuote":
        if len(raw) != QUOTE_LEN:
            raise ValidationError(f"quote must be {QUOTE_LEN} bytes, got {len(raw)}")
        measurement = raw[:48]
        rtmr = tuple(raw[48 + i * 48:48 + (i + 1) * 48] for i in range(4))
        report_data = raw[240:304]
        (collateral_id,) = struct.unpack("<Q", raw[304:312])
        return cls(
            report=TdReport(measurement, rtmr, report_data),
            collateral_id=collateral_id,
            signature=raw[312:],
        )


@dataclass(frozen=True)
class CollateralSnapshot:
    snapshot_id: int
    issued_at_ms: int
    revoked: frozenset[bytes]
    max_age_ms: int = DEFAULT_COLLATERAL_MAX_AGE_MS

    def age_ms(self, now_ms: int) -> int:
        return now_ms - self.issued_at_ms

    def to_json(self) -> str:
        return json.dumps(
            {
                "snapshot_id": self.snapshot_id,
                "issued_at_ms": self.issued_at_ms,
                "revoked": sorted(m.hex() for m in self.revoked),
                "max_age_ms": self.max_age_ms,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "CollateralSnapshot":
        try:
            doc = json.loads(text)
            return cls(
                snapshot_id=int(doc["snapshot_id"]),
                issued_at_ms=int(doc["issued_at_ms"]),
                revoked=frozenset(bytes.fromhex(m) for m in doc["revoked"]),
                max_age_ms=int(doc.get("max_age_ms", DEFAULT_COLLATERAL_MAX_AGE_MS)),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad collateral file: {exc}") from exc


class AttestationAuthority:
    """Holds the quote signing key and publishes verification collateral."""

    def __init__(self, signing_seed: bytes, *,
                 max_age_ms: int = DEFAULT_COLLATERAL_MAX_AGE_MS,
                 refresh_interval_ms: int = DEFAULT_REFRESH_INTERVAL_MS):
        if len(signing_seed) != 32:
            raise ValidationError("authority seed must be 32 bytes")
        self._key = ed25519.Ed25519PrivateKey.from_private_bytes(signing_seed)
        self.public_key = self._key.public_key().public_bytes_raw()
        self.max_age_ms = max_age_ms
        self.refresh_interval_ms = refresh_interval_ms
        self.available = True
        self._revoked: set[bytes] = set()
        self._snapshot_id = 0
        self._lock = threading.Lock()

    @property
    def snapshot_id(self) -> int:
        return self._snapshot_id

    def sign(self, payload: bytes) -> bytes:
        return self._key.sign(payload)

    def revoke(self, measurement: bytes) -> None:
        if len(measurement) != DIGEST_LEN:
            raise ValidationError("revoked measurement must be 48 bytes")
        with self._lock:
            self._revoked.add(bytes(measurement))

    def refresh_collateral(self, clock: Clock) -> CollateralSnapshot:
        """New snapshot reflecting the current revocation set."""
        if not self.available:
            raise RefreshFailed("attestation authority unreachable")
        with self._lock:
            self._snapshot_id += 1
            return CollateralSnapshot(
                snapshot_id=self._snapshot_id,
                issued_at_ms=clock.now_ms(),
                revoked=frozenset(self._revoked),
                max_age_ms=self.max_age_ms,
            )


# Service-time sampler; takes the enclave's RNG, returns milliseconds.
LatencySampler = Callable[[Random], float]


def default_quote_latency(rng: Random) -> float:
    # stdlib triangular() takes (low, high, mode)
    return rng.triangular(70.0, 105.0, 75.6)


class QuotingEnclave:
    """Per-host quote signer: an exclusive resource served in FIFO order.

    Against a SimClock, service occupancy is tracked as virtual-time
    bookkeeping and the returned latency includes queueing delay. Against a
    wall clock, requests serialize through a FIFO lock and the returned
    latency is the sampled service time, kept as accounting metadata rather
    than an enforced sleep.
    """

    def __init__(self, authority: AttestationAuthority, clock: Clock, *,
                 rng: Random | None = None,
                 sampler: LatencySampler = default_quote_latency):
        self.authority = authority
        self.clock = clock
        self.rng = rng or Random()
        self.sampler = sampler
        self._busy_until_ms = 0.0
        self._fifo = _FifoLock()

    def sign_report(self, report: TdReport) -> tuple[AttestationQuote, float]:
        service_ms = float(self.sampler(self.rng))
        if isinstance(self.clock, SimClock):
            start = self.clock.now_ms()
            begin = max(float(start), self._busy_until_ms)
            completion = begin + service_ms
            self._busy_until_ms = completion
            latency_ms = completion - start
        else:
            with self._fifo:
                latency_ms = service_ms
        quote = AttestationQuote(
            report=report,
            collateral_id=self.authority.snapshot_id,
            signature=self.authority.sign(
                quote_signing_payload(report, self.authority.snapshot_id)),
        )
        return quote, latency_ms


class _FifoLock:
    """Mutual exclusion granted strictly in arrival order."""

    def __init__(self):
        self._cond = threading.Condition()
        self._queue: deque[int] = deque()
        self._counter = 0
        self._active: int | None = None

    def __enter__(self):
        with self._cond:
            self._counter += 1
            ticket = self._counter
            self._queue.append(ticket)
            while self._active is not None or self._queue[0] != ticket:
                self._cond.wait()
            self._queue.popleft()
            self._active = ticket
        return self

    def __exit__(self, *exc):
        with self._cond:
            self._active = None
            self._cond.notify_all()
        return False


@dataclass(frozen=True)
class VerifiedIdentity:
    measurement: bytes
    rtmr: tuple[bytes, bytes, bytes, bytes]
    report_data: bytes
    collateral_id: int


def verify_quote(quote: AttestationQuote, *,
                 authority_public_key: bytes,
                 expected_measurement: bytes,
                 expected_rtmr3: bytes,
                 collateral: CollateralSnapshot,
                 now_ms: int) -> VerifiedIdentity:
    """Check signature, identity, lock register, revocation, then freshness.

    The check order is part of the contract: a quote that fails several
    checks always surfaces the same error.
    """
    try:
        key = ed25519.Ed25519PublicKey.from_public_bytes(authority_public_key)
        key.verify(quote.signature,
                   quote_signing_payload(quote.report, quote.collateral_id))
    except (InvalidSignature, ValueError) as exc:
        raise SignatureInvalid("quote signature rejected") from exc
    report = quote.report
    if report.measurement != expected_measurement:
        raise MeasurementMismatch(
            f"measurement {report.measurement.hex()[:16]}… not authorized"
        )
    if report.rtmr[3] != expected_rtmr3:
        raise Rtmr3Mismatch("runtime register 3 does not match pinned boot sequence")
    if report.measurement in collateral.revoked:
        raise Revoked("measurement is revoked in current collateral")
    if collateral.age_ms(now_ms) > collateral.max_age_ms:
        raise CollateralStale(
            f"collateral age {collateral.age_ms(now_ms)} ms exceeds "
            f"{collateral.max_age_ms} ms"
        )
    return VerifiedIdentity(
        measurement=report.measurement,
        rtmr=report.rtmr,
        report_data=report.report_data,
        collateral_id=quote.collateral_id,
    )
