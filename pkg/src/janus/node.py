"""Node identity and boot: measured proxy load, filter lock, seal.

A node's runtime identity is the pair (measurement, RTMR3 chain). The boot
sequence is deterministic: extend RTMR0 with the node measurement, extend
RTMR3 with the SHA-384 of the enforcement proxy input, engage the filter
lock (a second RTMR3 extend with a fixed marker), then seal. Two boots from
identical inputs therefore produce identical registers, which is what lets
a deployment pin one expected RTMR3 value for every peer.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .attestation import (
    AttestationAuthority,
    BPF_LOCK_MARKER,
    CollateralSnapshot,
    MeasurementRegisters,
    QuotingEnclave,
    extend_digest,
)
from .clock import Clock
from .errors import NotSealed, RefreshFailed, ValidationError
from .policy import PolicyEngine

DIGEST_LEN = 48


def bootstrap_registers(measurement: bytes, proxy_digest: bytes, *,
                        engage_lock: bool = True) -> MeasurementRegisters:
    """Run the boot sequence and seal. engage_lock=False models a node that
    skipped the filter lock; its RTMR3 will not match the pinned value."""
    regs = MeasurementRegisters()
    regs.extend(0, measurement)
    regs.extend(3, proxy_digest)
    if engage_lock:
        regs.engage_bpf_lock()
    regs.seal()
    return regs


def expected_rtmr3(proxy_digest: bytes) -> bytes:
    """The RTMR3 value a correctly locked boot of this proxy must show."""
    zero = b"\x00" * DIGEST_LEN
    return extend_digest(extend_digest(zero, proxy_digest), BPF_LOCK_MARKER)


@dataclass
class NodeIdentity:
    measurement: bytes
    proxy_digest: bytes
    bpf_lock: bool = True
    pinned_rtmr3: bytes | None = None

    def __post_init__(self):
        if len(self.measurement) != DIGEST_LEN:
            raise ValidationError("measurement must be 48 bytes")
        if len(self.proxy_digest) != DIGEST_LEN:
            raise ValidationError("proxy digest must be 48 bytes")

    def to_json(self) -> str:
        doc = {
            "measurement": self.measurement.hex(),
            "proxy_sha384": self.proxy_digest.hex(),
            "bpf_lock": self.bpf_lock,
        }
        if self.pinned_rtmr3 is not None:
            doc["expected_rtmr3"] = self.pinned_rtmr3.hex()
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NodeIdentity":
        try:
            doc = json.loads(text)
            pinned = doc.get("expected_rtmr3")
            return cls(
                measurement=bytes.fromhex(doc["measurement"]),
                proxy_digest=bytes.fromhex(doc["proxy_sha384"]),
                bpf_lock=bool(doc.get("bpf_lock", True)),
                pinned_rtmr3=bytes.fromhex(pinned) if pinned else None,
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad identity file: {exc}") from exc


def measurement_of(data: bytes) -> bytes:
    return hashlib.sha384(data).digest()


@dataclass
class NodeContext:
    """Everything the handshake and data plane read from a running node."""

    measurement: bytes
    registers: MeasurementRegisters
    policy: PolicyEngine
    endpoint: tuple[str, int]
    authority_public_key: bytes
    qe: QuotingEnclave
    clock: Clock
    expected_rtmr3: bytes
    collateral: CollateralSnapshot
    authority: AttestationAuthority | None = None
    handshake_deadline_ms: int = 2000

    def require_sealed(self) -> None:
        if not self.registers.sealed:
            raise NotSealed("node has not completed bootstrap")

    def current_collateral(self) -> CollateralSnapshot:
        """Refresh collateral if it aged past the polling interval.

        A failed refresh keeps the old snapshot: verification stays possible
        until the freshness bound expires, then fails closed.
        """
        auth = self.authority
        if auth is not None:
            age = self.collateral.age_ms(self.clock.now_ms())
            if age > auth.refresh_interval_ms:
                try:
                    self.collateral = auth.refresh_collateral(self.clock)
                except RefreshFailed:
                    pass
        return self.collateral


def build_node(identity: NodeIdentity, *, endpoint: tuple[str, int],
               authority: AttestationAuthority, clock: Clock,
               rng=None) -> NodeContext:
    """Boot a node from its identity and wire it to a local quoting enclave."""
    regs = bootstrap_registers(identity.measurement, identity.proxy_digest,
                               engage_lock=identity.bpf_lock)
    pinned = identity.pinned_rtmr3 or expected_rtmr3(identity.proxy_digest)
    return NodeContext(
        measurement=identity.measurement,
        registers=regs,
        policy=PolicyEngine(),
        endpoint=endpoint,
        authority_public_key=authority.public_key,
        qe=QuotingEnclave(authority, clock, rng=rng),
        clock=clock,
        expected_rtmr3=pinned,
        collateral=authority.refresh_collateral(clock),
        authority=authority,
    )
