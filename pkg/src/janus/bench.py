"""In-process per-packet cost benchmark.

Establishes one session between two locally bootstrapped nodes over the
in-memory exchange, then times the seal and open paths for a stream of
random payloads. Numbers are hardware-dependent; the stable artifact is
the report's shape: lookup, encrypt, decrypt, and total rows with p50/p99.
"""
from __future__ import annotations

import hashlib
import random

from . import handshake as hs
from .attestation import AttestationAuthority
from .clock import SimClock
from .dataplane import FlowKeyTable
from .node import NodeIdentity, build_node, measurement_of
from .policy import SAME_BUNDLE, FlowRule, PeerEntry, PolicyBundle, sign_bundle
from .tunnel import CostBook

_BENCH_AUTHORITY = hashlib.sha384(b"bench authority").digest()[:32]
_BENCH_OWNER = hashlib.sha384(b"bench owner").digest()[:32]


def _session_pair(seed: int):
    from cryptography.hazmat.primitives.asymmetric import ed25519

    clock = SimClock()
    authority = AttestationAuthority(_BENCH_AUTHORITY)
    mu_a = measurement_of(b"bench node a")
    mu_b = measurement_of(b"bench node b")
    proxy = hashlib.sha384(b"bench proxy").digest()
    addr_a = ("127.0.0.1", 9001)
    addr_b = ("127.0.0.1", 9002)
    owner = ed25519.Ed25519PrivateKey.from_private_bytes(_BENCH_OWNER)
    bundle = sign_bundle(PolicyBundle(
        epoch=1,
        rules=(
            FlowRule(mu_a, PeerEntry(*addr_b, mu_b, SAME_BUNDLE)),
            FlowRule(mu_b, PeerEntry(*addr_a, mu_a, SAME_BUNDLE)),
        ),
        owner_public_key=owner.public_key().public_bytes_raw(),
    ), owner)
    rng = random.Random(seed)
    node_a = build_node(NodeIdentity(mu_a, proxy), endpoint=addr_a,
                        authority=authority, clock=clock, rng=rng)
    node_b = build_node(NodeIdentity(mu_b, proxy), endpoint=addr_b,
                        authority=authority, clock=clock, rng=rng)
    node_a.policy.verify_and_install(bundle)
    node_b.policy.verify_and_install(bundle)
    state, f1 = hs.initiate(node_a, *addr_b)
    rstate, f2 = hs.respond(node_b, f1)
    mat_a, f3 = hs.finalize_initiator(state, node_a, f2)
    mat_b = hs.finalize_responder(rstate, node_b, f3)

    table_a = FlowKeyTable(lanes=1)
    table_a.policy = node_a.policy.index
    table_a.install(mat_a)
    table_b = FlowKeyTable(lanes=1)
    table_b.policy = node_b.policy.index
    table_b.install(mat_b)
    return table_a, table_b, addr_a, addr_b


def run_bench(count: int = 10_000, payload: int = 1400, *,
              seed: int = 0, warmup: int = 100) -> str:
    """Seal and open `count` payloads; returns the cost CSV."""
    table_a, table_b, addr_a, addr_b = _session_pair(seed)
    rng = random.Random(seed ^ 0x5EED)
    book = CostBook(warmup=warmup)
    for _ in range(count):
        inner = rng.randbytes(payload)
        result = table_a.seal(*addr_b, inner, 0, epoch=1, record_cost=True)
        book.add_seal(result.cost)
        opened, _, cost = table_b.open(result.frame, addr_a, record_cost=True)
        assert opened == inner
        book.add_open(cost)
    return book.csv()
