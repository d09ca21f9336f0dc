"""Signed, epoch-versioned flow policies.

A policy bundle is a list of directed flow rules (source measurement ->
destination endpoint) plus a monotonically increasing epoch, signed by the
workflow owner's Ed25519 key. The canonical byte encoding defined here is
the sole input to the policy digest, so two bundles with the same rules and
epoch produce byte-identical digests regardless of rule order or JSON
formatting.

Canonical encoding (all integers little-endian, fixed width):

    "JPV1" | epoch u64 | rule_count u32 | rule*

    rule := src_measurement (48 raw bytes)
          | dst_ip (4 bytes, dotted-quad order)
          | dst_port u16
          | dst_measurement (48 raw bytes)
          | dst_policy_digest (48 raw bytes)

Rules are sorted by (destination IPv4 as u32, destination port). The digest
is SHA-384 over exactly these bytes; the owner key and signature are not
part of the digest input. The signature covers the canonical bytes followed
by the 32-byte owner public key.
"""
from __future__ import annotations

import hashlib
import ipaddress
import json
import struct
import sys
import threading
from dataclasses import dataclass, replace

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519

from .errors import EpochDowngrade, SignatureInvalid, ValidationError

DIGEST_LEN = 48
CANONICAL_TAG = b"JPV1"
_U64_MAX = 2**64 - 1

# Reserved policy_digest value in a PeerEntry: "the peer enforces this same
# bundle". A bundle cannot contain its own digest (the hash would be
# self-referential), so shared-bundle deployments pin peers with this
# sentinel and verifiers substitute the locally installed digest.
SAME_BUNDLE = b"\x00" * DIGEST_LEN


def _require_bytes(name: str, value: bytes, length: int) -> None:
    if not isinstance(value, (bytes, bytearray)) or len(value) != length:
        raise ValidationError(f"{name} must be {length} bytes")


def _ip_u32(ip: str) -> int:
    try:
        return int(ipaddress.IPv4Address(ip))
    except (ipaddress.AddressValueError, ValueError) as exc:
        raise ValidationError(f"bad IPv4 address {ip!r}") from exc


@dataclass(frozen=True)
class PeerEntry:
    """Authorized destination endpoint with its expected attested identity."""

    ip: str
    port: int
    measurement: bytes
    policy_digest: bytes

    def __post_init__(self):
        _ip_u32(self.ip)
        if not 0 < self.port <= 0xFFFF:
            raise ValidationError(f"bad port {self.port}")
        _require_bytes("measurement", self.measurement, DIGEST_LEN)
        _require_bytes("policy_digest", self.policy_digest, DIGEST_LEN)

    @property
    def flow_key(self) -> tuple[int, int]:
        return (_ip_u32(self.ip), self.port)


@dataclass(frozen=True)
class FlowRule:
    """Directed edge: a source with this measurement may reach dst."""

    src_measurement: bytes
    dst: PeerEntry

    def __post_init__(self):
        _require_bytes("src_measurement", self.src_measurement, DIGEST_LEN)


@dataclass(frozen=True)
class PolicyBundle:
    epoch: int
    rules: tuple[FlowRule, ...]
    owner_public_key: bytes
    signature: bytes | None = None

    def __post_init__(self):
        if not 0 <= self.epoch <= _U64_MAX:
            raise ValidationError(f"epoch out of u64 range: {self.epoch}")
        object.__setattr__(self, "rules", tuple(self.rules))
        _require_bytes("owner_public_key", self.owner_public_key, 32)
        if self.signature is not None:
            _require_bytes("signature", self.signature, 64)


def _sorted_rules(rules: tuple[FlowRule, ...]) -> list[FlowRule]:
    ordered = sorted(rules, key=lambda r: r.dst.flow_key)
    seen = set()
    for rule in ordered:
        key = rule.dst.flow_key
        if key in seen:
            raise ValidationError(
                f"duplicate destination {rule.dst.ip}:{rule.dst.port}"
            )
        seen.add(key)
    return ordered


def canonical_bytes(bundle: PolicyBundle) -> bytes:
    """Digest input: tag, epoch, and the sorted rule list. No key, no sig."""
    out = [CANONICAL_TAG, struct.pack("<QI", bundle.epoch, len(bundle.rules))]
    for rule in _sorted_rules(bundle.rules):
        dst = rule.dst
        out.append(rule.src_measurement)
        out.append(ipaddress.IPv4Address(dst.ip).packed)
        out.append(struct.pack("<H", dst.port))
        out.append(dst.measurement)
        out.append(dst.policy_digest)
    return b"".join(out)


def compute_policy_digest(bundle: PolicyBundle) -> bytes:
    """48-byte SHA-384 digest of the canonical encoding."""
    return hashlib.sha384(canonical_bytes(bundle)).digest()


def _signing_input(bundle: PolicyBundle) -> bytes:
    return canonical_bytes(bundle) + bundle.owner_public_key


def sign_bundle(bundle: PolicyBundle, signing_key: ed25519.Ed25519PrivateKey) -> PolicyBundle:
    """Return a copy signed by the owner key; the key must match the bundle."""
    pub = signing_key.public_key().public_bytes_raw()
    if pub != bundle.owner_public_key:
        raise ValidationError("signing key does not match owner_public_key")
    return replace(bundle, signature=signing_key.sign(_signing_input(bundle)))


def verify_signature(bundle: PolicyBundle) -> None:
    if bundle.signature is None:
        raise SignatureInvalid("bundle is unsigned")
    try:
        key = ed25519.Ed25519PublicKey.from_public_bytes(bundle.owner_public_key)
        key.verify(bundle.signature, _signing_input(bundle))
    except (InvalidSignature, ValueError) as exc:
        raise SignatureInvalid("policy signature rejected") from exc


# --- JSON interchange -------------------------------------------------------

def bundle_to_json(bundle: PolicyBundle) -> str:
    doc = {
        "epoch": bundle.epoch,
        "rules": [
            {
                "src_measurement": r.src_measurement.hex(),
                "dst": {
                    "ip": r.dst.ip,
                    "port": r.dst.port,
                    "measurement": r.dst.measurement.hex(),
                    "policy_digest": r.dst.policy_digest.hex(),
                },
            }
            for r in bundle.rules
        ],
        "owner_pubkey": bundle.owner_public_key.hex(),
    }
    if bundle.signature is not None:
        doc["signature"] = bundle.signature.hex()
    return json.dumps(doc, indent=2, sort_keys=True)


def _hex_field(doc: dict, name: str, length: int) -> bytes:
    raw = doc.get(name)
    if not isinstance(raw, str):
        raise ValidationError(f"missing or non-string field {name!r}")
    try:
        value = bytes.fromhex(raw)
    except ValueError as exc:
        raise ValidationError(f"field {name!r} is not hex") from exc
    if len(value) != length:
        raise ValidationError(f"field {name!r} must be {length} bytes")
    return value


def bundle_from_json(text: str) -> PolicyBundle:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"policy is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("policy document must be a JSON object")
    epoch = doc.get("epoch")
    if not isinstance(epoch, int):
        raise ValidationError("epoch must be an integer")
    raw_rules = doc.get("rules")
    if not isinstance(raw_rules, list):
        raise ValidationError("rules must be a list")
    rules = []
    for raw in raw_rules:
        if not isinstance(raw, dict) or not isinstance(raw.get("dst"), dict):
            raise ValidationError("each rule needs src_measurement and dst")
        dst = raw["dst"]
        port = dst.get("port")
        if not isinstance(port, int):
            raise ValidationError("dst.port must be an integer")
        rules.append(
            FlowRule(
                src_measurement=_hex_field(raw, "src_measurement", DIGEST_LEN),
                dst=PeerEntry(
                    ip=str(dst.get("ip", "")),
                    port=port,
                    measurement=_hex_field(dst, "measurement", DIGEST_LEN),
                    policy_digest=_hex_field(dst, "policy_digest", DIGEST_LEN),
                ),
            )
        )
    signature = _hex_field(doc, "signature", 64) if "signature" in doc else None
    bundle = PolicyBundle(
        epoch=epoch,
        rules=tuple(rules),
        owner_public_key=_hex_field(doc, "owner_pubkey", 32),
        signature=signature,
    )
    _sorted_rules(bundle.rules)  # reject duplicate destinations early
    return bundle


# --- installed index --------------------------------------------------------

class PolicyIndex:
    """Immutable lookup structure built from a verified bundle.

    The data-plane lookup is a single dict probe keyed by (dest IPv4 as u32,
    dest port); the stored PeerEntry objects are returned by reference.
    """

    def __init__(self, bundle: PolicyBundle):
        self.epoch = bundle.epoch
        self.digest = compute_policy_digest(bundle)
        self._by_flow: dict[tuple[int, int], PeerEntry] = {}
        self._by_measurement: dict[bytes, PeerEntry] = {}
        self._by_src: dict[bytes, tuple[PeerEntry, ...]] = {}
        self._measurements: frozenset[bytes] = frozenset()
        members = set()
        by_src: dict[bytes, list[PeerEntry]] = {}
        for rule in _sorted_rules(bundle.rules):
            key = rule.dst.flow_key
            self._by_flow[key] = rule.dst
            self._by_measurement[rule.dst.measurement] = rule.dst
            by_src.setdefault(rule.src_measurement, []).append(rule.dst)
            members.add(rule.src_measurement)
            members.add(rule.dst.measurement)
        self._by_src = {src: tuple(dsts) for src, dsts in by_src.items()}
        self._measurements = frozenset(members)

    @property
    def entry_count(self) -> int:
        return len(self._by_flow)

    @property
    def memory_bytes(self) -> int:
        return _deep_sizeof((self._by_flow, self._by_measurement,
                             self._by_src, self._measurements))

    def lookup(self, ip: str, port: int) -> PeerEntry | None:
        """O(1) destination authorization probe. None means the flow is denied."""
        return self._by_flow.get((_ip_u32(ip), port))

    def knows_measurement(self, measurement: bytes) -> bool:
        """Membership of a measurement anywhere in the installed bundle.

        Destination reachability is endpoint-keyed; inbound admission is
        membership-keyed, since the bundle names every participant of the
        workflow either as a rule source or as a destination identity.
        """
        return measurement in self._measurements

    def peer_by_measurement(self, measurement: bytes) -> PeerEntry | None:
        """Endpoint of the peer carrying this measurement, if any rule names it."""
        return self._by_measurement.get(measurement)

    def destinations_for(self, src_measurement: bytes) -> tuple[PeerEntry, ...]:
        """Every destination a source with this measurement may reach, in
        canonical rule order."""
        return self._by_src.get(src_measurement, ())


def _deep_sizeof(obj, _seen=None) -> int:
    if _seen is None:
        _seen = set()
    if id(obj) in _seen:
        return 0
    _seen.add(id(obj))
    size = sys.getsizeof(obj)
    if isinstance(obj, dict):
        for k, v in obj.items():
            size += _deep_sizeof(k, _seen) + _deep_sizeof(v, _seen)
    elif isinstance(obj, (list, tuple, set, frozenset)):
        for item in obj:
            size += _deep_sizeof(item, _seen)
    elif hasattr(obj, "__dict__"):
        size += _deep_sizeof(vars(obj), _seen)
    return size


class PolicyEngine:
    """Holds the installed index and enforces epoch monotonicity."""

    def __init__(self):
        self._lock = threading.Lock()
        self.index: PolicyIndex | None = None

    @property
    def current_epoch(self) -> int | None:
        index = self.index
        return None if index is None else index.epoch

    def verify_and_install(self, bundle: PolicyBundle) -> PolicyIndex:
        """Signature check, strict epoch advance, then atomic publish."""
        verify_signature(bundle)
        with self._lock:
            current = self.current_epoch
            if current is not None and bundle.epoch <= current:
                raise EpochDowngrade(
                    f"bundle epoch {bundle.epoch} <= installed epoch {current}"
                )
            index = PolicyIndex(bundle)
            self.index = index
        return index
