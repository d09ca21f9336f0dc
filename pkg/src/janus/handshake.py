"""Mutually attested key exchange (three flights over a reliable stream).

SIGMA-style exchange in which each side's ephemeral ECDH share, nonce, and
policy digest are bound into the report_data slot of a signed attestation
quote instead of a classical certificate signature:

    flight 1  initiator -> responder   pk_s, n_s, Q_s
                                       Q_s binds H(pk_s, pi_s, n_s)
    flight 2  responder -> initiator   pk_d, n_d, Q_d, pi_d
                                       Q_d binds H(pk_d, pi_d, n_d, pk_s, n_s)
    flight 3  initiator -> responder   confirmation MAC

The responder never learns pi_s from the wire; it recomputes the expected
binding from its own installed digest, so a digest disagreement terminates
the exchange at flight 1 processing. Session material comes from
HKDF-SHA-384 over the ECDH shared secret with salt SHA-384(Q_s || Q_d);
the data key and confirmation key use the fixed info strings
"make/v1/data" and "make/v1/confirm". The key id and the two per-role
nonce prefixes are derived from the same PRK so both endpoints can
reconstruct every data-plane nonce without extra wire fields.

Ephemeral scalars and derived secrets live in bytearrays that are
overwritten on destroy(); tests observe this through the *_view hooks.
"""
from __future__ import annotations

import hashlib
import hmac
import secrets
from dataclasses import dataclass

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import wire
from .attestation import (
    AttestationQuote,
    bind_report_data,
    generate_report,
    verify_quote,
)
from .errors import (
    AttestationRejected,
    BindingMismatch,
    ConfirmationFailed,
    EpochMismatch,
    HandshakeError,
    HandshakeTimeout,
    InvalidPoint,
    MalformedFlight,
    MeasurementMismatch,
    PeerAborted,
    PeerRejected,
    SignatureInvalid,
    ValidationError,
)
from .policy import SAME_BUNDLE, PeerEntry

CURVE = ec.SECP384R1()
PUBKEY_LEN = 97  # uncompressed point: 0x04 || X(48) || Y(48)
NONCE_LEN = 32
MAC_LEN = 48

INFO_DATA = b"make/v1/data"
INFO_CONFIRM = b"make/v1/confirm"
INFO_KEY_ID = b"make/v1/keyid"
INFO_NONCE_INITIATOR = b"make/v1/nonce/initiator"
INFO_NONCE_RESPONDER = b"make/v1/nonce/responder"

DEFAULT_DEADLINE_MS = 2000

# Abort reason codes mapped back to local exception types on receipt.
_REASON_ERRORS = {
    EpochMismatch.reason_code: EpochMismatch,
    BindingMismatch.reason_code: BindingMismatch,
    ConfirmationFailed.reason_code: ConfirmationFailed,
    PeerRejected.reason_code: PeerRejected,
}


class EphemeralKey:
    """P-384 keypair whose scalar is held in a zeroizable buffer."""

    def __init__(self):
        self._private = ec.generate_private_key(CURVE)
        scalar = self._private.private_numbers().private_value
        self._scalar = bytearray(scalar.to_bytes(48, "big"))

    def public_bytes(self) -> bytes:
        return self._private.public_key().public_bytes(
            Encoding.X962, PublicFormat.UncompressedPoint
        )

    def exchange(self, peer_public_bytes: bytes) -> bytes:
        peer = decode_public_key(peer_public_bytes)
        return self._private.exchange(ec.ECDH(), peer)

    def destroy(self) -> None:
        for i in range(len(self._scalar)):
            self._scalar[i] = 0
        self._private = None

    @property
    def scalar_view(self) -> bytes:
        """Test hook: current scalar buffer contents."""
        return bytes(self._scalar)


def decode_public_key(raw: bytes) -> ec.EllipticCurvePublicKey:
    if len(raw) != PUBKEY_LEN:
        raise InvalidPoint(f"public key must be {PUBKEY_LEN} bytes")
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(CURVE, raw)
    except ValueError as exc:
        raise InvalidPoint("point not on curve") from exc


@dataclass
class SessionMaterial:
    """Everything the data plane needs for one established session."""

    data_key: bytearray
    confirm_key: bytearray
    key_id: int
    initiator_prefix: bytes  # 6-byte nonce prefix for frames the initiator seals
    responder_prefix: bytes
    src_measurement: bytes
    dst_measurement: bytes
    policy_digest: bytes
    epoch: int
    established_ms: int
    role: str  # "initiator" | "responder"
    peer: tuple[str, int] | None

    @property
    def cache_key(self) -> tuple[bytes, bytes, bytes]:
        return (self.src_measurement, self.dst_measurement, self.policy_digest)

    def destroy(self) -> None:
        for buf in (self.data_key, self.confirm_key):
            for i in range(len(buf)):
                buf[i] = 0

    @property
    def key_view(self) -> bytes:
        """Test hook: live data-key buffer contents."""
        return bytes(self.data_key)


def derive_session(shared_secret: bytes, quote_initiator: bytes,
                   quote_responder: bytes) -> dict:
    """HKDF-SHA-384 tree over the ECDH secret, salted with both quotes."""
    salt = hashlib.sha384(quote_initiator + quote_responder).digest()

    def expand(info: bytes, length: int) -> bytes:
        return HKDF(
            algorithm=hashes.SHA384(), length=length, salt=salt, info=info
        ).derive(shared_secret)

    return {
        "data_key": bytearray(expand(INFO_DATA, 32)),
        "confirm_key": bytearray(expand(INFO_CONFIRM, 32)),
        "key_id": int.from_bytes(expand(INFO_KEY_ID, 4), "big"),
        "initiator_prefix": expand(INFO_NONCE_INITIATOR, 6),
        "responder_prefix": expand(INFO_NONCE_RESPONDER, 6),
    }


def confirmation_mac(confirm_key: bytes, quote_responder: bytes,
                     quote_initiator: bytes) -> bytes:
    """Flight 3 MAC over Q_d || Q_s. Note the order is the reverse of the
    KDF salt, so the confirmation input is never byte-equal to it."""
    return hmac.new(bytes(confirm_key), quote_responder + quote_initiator,
                    hashlib.sha384).digest()


@dataclass
class InitiatorState:
    ephemeral: EphemeralKey
    nonce: bytes
    peer: PeerEntry
    epoch: int
    own_quote_bytes: bytes
    deadline_ms: int
    aborted: bool = False

    def destroy(self) -> None:
        self.ephemeral.destroy()
        self.aborted = True


@dataclass
class ResponderState:
    material: SessionMaterial
    expected_mac: bytes
    quote_initiator: bytes
    quote_responder: bytes
    epoch: int
    deadline_ms: int
    peer_measurement: bytes
    aborted: bool = False

    def destroy(self) -> None:
        self.material.destroy()
        self.aborted = True


def _abort(ctx, error: HandshakeError) -> bytes:
    """Abort frame bytes for the given local failure."""
    epoch = ctx.policy.index.epoch if ctx.policy.index else 0
    return wire.encode_abort(epoch, error.reason_code)


def _raise_for_abort(flight: wire.Flight) -> None:
    reason = wire.abort_reason(flight)
    exc_type = _REASON_ERRORS.get(reason)
    if exc_type is not None:
        raise exc_type(f"peer aborted (reason {reason})")
    raise PeerAborted(reason)


def initiate(ctx, dest_ip: str, dest_port: int):
    """Start an exchange toward an authorized destination.

    Returns (InitiatorState, flight1 bytes). The caller owns transport and
    must feed the response to finalize_initiator before the deadline.
    """
    ctx.require_sealed()
    index = ctx.policy.index
    if index is None:
        raise ValidationError("no policy installed")
    peer = index.lookup(dest_ip, dest_port)
    if peer is None:
        raise ValidationError(f"destination {dest_ip}:{dest_port} not in policy")
    eph = EphemeralKey()
    nonce = secrets.token_bytes(NONCE_LEN)
    pk = eph.public_bytes()
    report_data = bind_report_data([pk, index.digest, nonce])
    report = generate_report(ctx.registers, ctx.measurement, report_data)
    quote, _latency = ctx.qe.sign_report(report)
    quote_bytes = quote.to_bytes()
    flight1 = wire.encode_flight(1, index.epoch, [
        (wire.TAG_PUBKEY, pk),
        (wire.TAG_NONCE, nonce),
        (wire.TAG_QUOTE, quote_bytes),
    ])
    state = InitiatorState(
        ephemeral=eph,
        nonce=nonce,
        peer=peer,
        epoch=index.epoch,
        own_quote_bytes=quote_bytes,
        deadline_ms=ctx.clock.now_ms() + ctx.handshake_deadline_ms,
    )
    return state, flight1


def _required_field(flight: wire.Flight, tag: int, length: int | None = None) -> bytes:
    value = flight.fields.get(tag)
    if value is None:
        raise MalformedFlight(f"missing tag {tag}")
    if length is not None and len(value) != length:
        raise MalformedFlight(f"tag {tag} must be {length} bytes")
    return value


def respond(ctx, flight1_bytes: bytes):
    """Process flight 1; returns (ResponderState, flight2 bytes).

    On failure raises the typed error; the transport layer should send
    abort_bytes_for(ctx, error) to the peer before closing.
    """
    ctx.require_sealed()
    index = ctx.policy.index
    if index is None:
        raise ValidationError("no policy installed")
    flight = wire.decode_flight(flight1_bytes)
    if flight.is_abort:
        _raise_for_abort(flight)
    if flight.flight_no != 1:
        raise MalformedFlight(f"expected flight 1, got {flight.flight_no}")
    if flight.epoch != index.epoch:
        raise EpochMismatch(
            f"initiator at epoch {flight.epoch}, local epoch {index.epoch}"
        )
    pk_s = _required_field(flight, wire.TAG_PUBKEY, PUBKEY_LEN)
    n_s = _required_field(flight, wire.TAG_NONCE, NONCE_LEN)
    quote_s_bytes = _required_field(flight, wire.TAG_QUOTE)
    try:
        quote_s = AttestationQuote.from_bytes(quote_s_bytes)
    except ValidationError as exc:
        raise MalformedFlight(str(exc)) from exc
    decode_public_key(pk_s)  # curve membership before any use

    # The claimed measurement must belong to the installed bundle.
    mu_s = quote_s.report.measurement
    if not index.knows_measurement(mu_s):
        raise MeasurementMismatch("initiator measurement not in installed policy")
    verify_quote(
        quote_s,
        authority_public_key=ctx.authority_public_key,
        expected_measurement=mu_s,
        expected_rtmr3=ctx.expected_rtmr3,
        collateral=ctx.current_collateral(),
        now_ms=ctx.clock.now_ms(),
    )
    # Both ends of an authorized edge enforce the same installed bundle, so
    # the expected initiator digest is our own. A diverging bundle fails here.
    expected_binding = bind_report_data([pk_s, index.digest, n_s])
    if not hmac.compare_digest(expected_binding, quote_s.report.report_data):
        raise BindingMismatch("flight 1 report data does not match binding")

    eph = EphemeralKey()
    n_d = secrets.token_bytes(NONCE_LEN)
    pk_d = eph.public_bytes()
    report_data = bind_report_data([pk_d, index.digest, n_d, pk_s, n_s])
    report = generate_report(ctx.registers, ctx.measurement, report_data)
    quote_d, _latency = ctx.qe.sign_report(report)
    quote_d_bytes = quote_d.to_bytes()
    try:
        shared = eph.exchange(pk_s)
    finally:
        eph.destroy()
    derived = derive_session(shared, quote_s_bytes, quote_d_bytes)
    # Reverse rule (us -> initiator), when present, names the peer endpoint;
    # otherwise the tunnel binds it from the first authenticated frame.
    reverse = index.peer_by_measurement(mu_s)
    material = SessionMaterial(
        data_key=derived["data_key"],
        confirm_key=derived["confirm_key"],
        key_id=derived["key_id"],
        initiator_prefix=derived["initiator_prefix"],
        responder_prefix=derived["responder_prefix"],
        src_measurement=mu_s,
        dst_measurement=ctx.measurement,
        policy_digest=index.digest,
        epoch=index.epoch,
        established_ms=ctx.clock.now_ms(),
        role="responder",
        peer=(reverse.ip, reverse.port) if reverse is not None else None,
    )
    expected_mac = confirmation_mac(material.confirm_key, quote_d_bytes,
                                    quote_s_bytes)
    flight2 = wire.encode_flight(2, index.epoch, [
        (wire.TAG_PUBKEY, pk_d),
        (wire.TAG_NONCE, n_d),
        (wire.TAG_QUOTE, quote_d_bytes),
        (wire.TAG_POLICY_DIGEST, index.digest),
    ])
    state = ResponderState(
        material=material,
        expected_mac=expected_mac,
        quote_initiator=quote_s_bytes,
        quote_responder=quote_d_bytes,
        epoch=index.epoch,
        deadline_ms=ctx.clock.now_ms() + ctx.handshake_deadline_ms,
        peer_measurement=mu_s,
    )
    return state, flight2


def finalize_initiator(state: InitiatorState, ctx, flight2_bytes: bytes):
    """Process flight 2; returns (SessionMaterial, flight3 bytes)."""
    if ctx.clock.now_ms() > state.deadline_ms:
        state.destroy()
        raise HandshakeTimeout("flight 2 arrived after deadline")
    flight = wire.decode_flight(flight2_bytes)
    if flight.is_abort:
        state.destroy()
        _raise_for_abort(flight)
    try:
        if flight.flight_no != 2:
            raise MalformedFlight(f"expected flight 2, got {flight.flight_no}")
        if flight.epoch != state.epoch:
            raise EpochMismatch(
                f"responder at epoch {flight.epoch}, local epoch {state.epoch}"
            )
        # a rollover that lands mid-handshake aborts the exchange; the
        # initiator retries under the new epoch rather than completing a
        # session the table would immediately retire
        if ctx.policy.index is None or ctx.policy.index.epoch != state.epoch:
            raise EpochMismatch("local policy rolled during handshake")
        pk_d = _required_field(flight, wire.TAG_PUBKEY, PUBKEY_LEN)
        n_d = _required_field(flight, wire.TAG_NONCE, NONCE_LEN)
        quote_d_bytes = _required_field(flight, wire.TAG_QUOTE)
        digest_d = _required_field(flight, wire.TAG_POLICY_DIGEST, 48)
        try:
            quote_d = AttestationQuote.from_bytes(quote_d_bytes)
        except ValidationError as exc:
            raise MalformedFlight(str(exc)) from exc
        decode_public_key(pk_d)
        peer = state.peer
        verify_quote(
            quote_d,
            authority_public_key=ctx.authority_public_key,
            expected_measurement=peer.measurement,
            expected_rtmr3=ctx.expected_rtmr3,
            collateral=ctx.current_collateral(),
            now_ms=ctx.clock.now_ms(),
        )
        expected_digest = peer.policy_digest
        if expected_digest == SAME_BUNDLE:
            expected_digest = ctx.policy.index.digest
        if digest_d != expected_digest:
            raise BindingMismatch("responder digest differs from pinned value")
        pk_s = state.ephemeral.public_bytes()
        expected_binding = bind_report_data(
            [pk_d, expected_digest, n_d, pk_s, state.nonce]
        )
        if not hmac.compare_digest(expected_binding, quote_d.report.report_data):
            raise BindingMismatch("flight 2 report data does not match binding")
        shared = state.ephemeral.exchange(pk_d)
    except BaseException:
        state.destroy()
        raise
    state.ephemeral.destroy()
    derived = derive_session(shared, state.own_quote_bytes, quote_d_bytes)
    material = SessionMaterial(
        data_key=derived["data_key"],
        confirm_key=derived["confirm_key"],
        key_id=derived["key_id"],
        initiator_prefix=derived["initiator_prefix"],
        responder_prefix=derived["responder_prefix"],
        src_measurement=ctx.measurement,
        dst_measurement=peer.measurement,
        policy_digest=ctx.policy.index.digest,
        epoch=state.epoch,
        established_ms=ctx.clock.now_ms(),
        role="initiator",
        peer=(peer.ip, peer.port),
    )
    mac = confirmation_mac(material.confirm_key, quote_d_bytes,
                           state.own_quote_bytes)
    flight3 = wire.encode_flight(3, state.epoch, [(wire.TAG_CONFIRM_MAC, mac)])
    return material, flight3


def finalize_responder(state: ResponderState, ctx, flight3_bytes: bytes) -> SessionMaterial:
    """Process flight 3; returns the established SessionMaterial."""
    if ctx.clock.now_ms() > state.deadline_ms:
        state.destroy()
        raise HandshakeTimeout("flight 3 arrived after deadline")
    flight = wire.decode_flight(flight3_bytes)
    if flight.is_abort:
        state.destroy()
        _raise_for_abort(flight)
    try:
        if flight.flight_no != 3:
            raise MalformedFlight(f"expected flight 3, got {flight.flight_no}")
        if flight.epoch != state.epoch:
            raise EpochMismatch(
                f"initiator at epoch {flight.epoch}, local epoch {state.epoch}"
            )
        if ctx.policy.index is None or ctx.policy.index.epoch != state.epoch:
            raise EpochMismatch("local policy rolled during handshake")
        mac = _required_field(flight, wire.TAG_CONFIRM_MAC, MAC_LEN)
        if not hmac.compare_digest(mac, state.expected_mac):
            raise ConfirmationFailed("flight 3 MAC rejected")
    except BaseException:
        state.destroy()
        raise
    return state.material


def abort_bytes_for(ctx, error: Exception) -> bytes:
    """Wire abort frame matching a local failure, for the transport to send."""
    if isinstance(error, HandshakeError):
        return _abort(ctx, error)
    # any attestation verdict, including a bad quote signature, surfaces to
    # the peer as a rejection rather than a framing problem
    if isinstance(error, (AttestationRejected, SignatureInvalid)):
        return _abort(ctx, PeerRejected(str(error)))
    return _abort(ctx, MalformedFlight(str(error)))
