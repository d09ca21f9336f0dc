"""Exception taxonomy shared across the control plane and data plane.

Every rejection an endpoint can produce maps to exactly one class here so
tests and scenario assertions can match on type rather than message text.
"""
from __future__ import annotations


class JanusError(Exception):
    """Base class for all errors raised by this package."""


# --- policy -----------------------------------------------------------------

class ValidationError(JanusError):
    """Malformed or internally inconsistent input (policy, scenario, frame)."""


class SignatureInvalid(JanusError):
    """A digital signature failed verification."""


class EpochDowngrade(JanusError):
    """A policy bundle carried an epoch at or below the installed one."""


# --- attestation ------------------------------------------------------------

class AttestationRejected(JanusError):
    """Base class for quote verification failures."""


class MeasurementMismatch(AttestationRejected):
    """Quote measurement does not match the expected value."""


class Rtmr3Mismatch(AttestationRejected):
    """Runtime register 3 does not match the pinned boot sequence."""


class Revoked(AttestationRejected):
    """Quote measurement appears in the active collateral revocation set."""


class CollateralStale(AttestationRejected):
    """Verification collateral is older than the freshness bound."""


class RefreshFailed(JanusError):
    """The attestation authority could not produce fresh collateral."""


class NotSealed(JanusError):
    """A node attempted an attested operation before sealing its registers."""


# --- handshake --------------------------------------------------------------

class HandshakeError(JanusError):
    """Base class for key-exchange aborts. Carries the abort reason code."""

    reason_code = 0

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)


class MalformedFlight(HandshakeError):
    reason_code = 1


class EpochMismatch(HandshakeError):
    reason_code = 2


class BindingMismatch(HandshakeError):
    """Report data does not match the locally recomputed binding."""

    reason_code = 3


class ConfirmationFailed(HandshakeError):
    """Flight 3 confirmation MAC did not verify."""

    reason_code = 4


class PeerRejected(HandshakeError):
    """Peer attestation failed (wraps an AttestationRejected cause)."""

    reason_code = 5


class InvalidPoint(HandshakeError):
    """Peer ephemeral public key is not a valid curve point."""

    reason_code = 6


class HandshakeTimeout(HandshakeError):
    reason_code = 7


class HandshakeRefused(HandshakeError):
    """Session-cache lock budget exhausted; the endpoint refused the attempt."""

    reason_code = 8


class PeerAborted(HandshakeError):
    """Peer sent an abort flight; `peer_reason` holds its reason code."""

    reason_code = 9

    def __init__(self, peer_reason: int, message: str = ""):
        self.peer_reason = peer_reason
        super().__init__(message or f"peer aborted with reason {peer_reason}")


# --- data plane -------------------------------------------------------------

class PacketReject(JanusError):
    """Base class for per-frame rejections on the receive path."""


class AuthFailed(PacketReject):
    """Frame failed authentication (tag mismatch or unauthenticatable)."""


class UnknownKey(AuthFailed):
    """No key material exists for the frame's (flow, epoch, key id)."""


class EpochTooOld(PacketReject):
    """Frame epoch was already flushed; its keys are destroyed."""


class ReplayDetected(PacketReject):
    """Duplicate (lane, counter) inside the anti-replay window."""
