import hashlib
import sys
from pathlib import Path

import pytest
from cryptography.hazmat.primitives.asymmetric import ed25519

sys.path.insert(0, str(Path(__file__).parent))

from janus.attestation import AttestationAuthority
from janus.clock import SimClock
from janus.node import NodeIdentity, build_node, measurement_of
from janus.policy import (
    SAME_BUNDLE,
    FlowRule,
    PeerEntry,
    PolicyBundle,
    sign_bundle,
)

OWNER_SEED = b"\x11" * 32
AUTHORITY_SEED = b"\x07" * 32
PROXY_DIGEST = hashlib.sha384(b"reference enforcement proxy v1").digest()


def owner_key() -> ed25519.Ed25519PrivateKey:
    return ed25519.Ed25519PrivateKey.from_private_bytes(OWNER_SEED)


def make_bundle(epoch: int, endpoints: dict[bytes, tuple[str, int]],
                *, key: ed25519.Ed25519PrivateKey | None = None,
                extra_rules: tuple = ()) -> PolicyBundle:
    """Full-mesh signed bundle: every measurement may reach every other."""
    key = key or owner_key()
    rules = list(extra_rules)
    for src_mu in endpoints:
        for dst_mu, (ip, port) in endpoints.items():
            if src_mu == dst_mu:
                continue
            rules.append(FlowRule(src_mu, PeerEntry(ip, port, dst_mu, SAME_BUNDLE)))
    # full mesh yields duplicate destinations; collapse to one rule per dest
    by_dest = {}
    for rule in rules:
        by_dest.setdefault(rule.dst.flow_key, []).append(rule)
    deduped = []
    for entries in by_dest.values():
        deduped.append(entries[0])
    bundle = PolicyBundle(
        epoch=epoch,
        rules=tuple(deduped),
        owner_public_key=key.public_key().public_bytes_raw(),
    )
    return sign_bundle(bundle, key)


class NodePair:
    """Two bootstrapped nodes sharing an authority and a signed bundle."""

    def __init__(self, epoch: int = 1, *, clock: SimClock | None = None):
        self.clock = clock or SimClock()
        self.authority = AttestationAuthority(AUTHORITY_SEED)
        self.mu_a = measurement_of(b"node A binary")
        self.mu_b = measurement_of(b"node B binary")
        self.addr_a = ("127.0.0.1", 7001)
        self.addr_b = ("127.0.0.1", 7002)
        self.node_a = build_node(NodeIdentity(self.mu_a, PROXY_DIGEST),
                                 endpoint=self.addr_a,
                                 authority=self.authority, clock=self.clock)
        self.node_b = build_node(NodeIdentity(self.mu_b, PROXY_DIGEST),
                                 endpoint=self.addr_b,
                                 authority=self.authority, clock=self.clock)
        self.install(epoch)

    def bundle(self, epoch: int) -> PolicyBundle:
        return make_bundle(epoch, {self.mu_a: self.addr_a, self.mu_b: self.addr_b})

    def install(self, epoch: int) -> None:
        bundle = self.bundle(epoch)
        self.node_a.policy.verify_and_install(bundle)
        self.node_b.policy.verify_and_install(bundle)


@pytest.fixture
def pair() -> NodePair:
    return NodePair()


def run_handshake(pair: NodePair):
    """Complete exchange A -> B; returns (material_a, material_b)."""
    from janus import handshake as hs

    state, f1 = hs.initiate(pair.node_a, *pair.addr_b)
    rstate, f2 = hs.respond(pair.node_b, f1)
    mat_a, f3 = hs.finalize_initiator(state, pair.node_a, f2)
    mat_b = hs.finalize_responder(rstate, pair.node_b, f3)
    return mat_a, mat_b
