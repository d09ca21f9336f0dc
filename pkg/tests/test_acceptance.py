"""Release gate: one test per numbered acceptance criterion.

Run with -v to get one pass/fail line per criterion. Each test pins the
stated sample sizes and tolerances; expected values come from closed-form
arithmetic, independent reference implementations, or explicit reference
points, never from the code under test.
"""
import collections
import hashlib
import json
import random
import struct
import time

import jsonschema
import pytest

import oracles
from conftest import PROXY_DIGEST, NodePair, make_bundle, run_handshake
from janus import handshake as hs
from janus import scenarios, wire
from janus.clock import SimClock
from janus.dataplane import HEADER, HEADER_LEN, TAG_LEN, FlowKeyTable, Verdict
from janus.errors import (
    AttestationRejected,
    AuthFailed,
    BindingMismatch,
    ConfirmationFailed,
    EpochDowngrade,
    EpochMismatch,
    InvalidPoint,
    MeasurementMismatch,
    SignatureInvalid,
)
from janus.node import NodeIdentity, build_node, measurement_of
from janus.relay import flip_field
from janus.scale import (
    Impairments,
    TransferCostModel,
    closed_form_init,
    replay_dag_transfers,
    simulate_dag_init,
    simulate_init,
)
from janus.topologies import named_dag
from nethelpers import TunnelRig, relayed_rig


# --- 1: key agreement at scale ----------------------------------------------

def test_criterion_01_handshake_agreement_10k_runs():
    pair = NodePair()
    agreed = 0
    oracle_checks = 0
    started = time.perf_counter()
    for i in range(10_000):
        state, f1 = hs.initiate(pair.node_a, *pair.addr_b)
        scalar = bytes(state.ephemeral.scalar_view) if i % 100 == 0 else None
        rstate, f2 = hs.respond(pair.node_b, f1)
        mat_a, f3 = hs.finalize_initiator(state, pair.node_a, f2)
        mat_b = hs.finalize_responder(rstate, pair.node_b, f3)
        if (bytes(mat_a.data_key) == bytes(mat_b.data_key)
                and bytes(mat_a.confirm_key) == bytes(mat_b.confirm_key)
                and mat_a.key_id == mat_b.key_id
                and mat_a.initiator_prefix == mat_b.initiator_prefix
                and mat_a.responder_prefix == mat_b.responder_prefix):
            agreed += 1
        if scalar is not None:
            # recompute the whole derivation with the stdlib-only reference
            pk_d = wire.decode_flight(f2).fields[wire.TAG_PUBKEY]
            q_s = wire.decode_flight(f1).fields[wire.TAG_QUOTE]
            q_d = wire.decode_flight(f2).fields[wire.TAG_QUOTE]
            shared = oracles.ecdh_shared_secret(scalar, pk_d)
            salt = hashlib.sha384(q_s + q_d).digest()
            assert oracles.hkdf_sha384(shared, salt, b"make/v1/data",
                                       32) == bytes(mat_a.data_key)
            oracle_checks += 1
        mat_a.destroy()
        mat_b.destroy()
    elapsed = time.perf_counter() - started
    assert agreed == 10_000
    assert oracle_checks == 100
    assert elapsed < 60.0, f"10k handshakes took {elapsed:.1f}s"


# --- 2: single-field tamper matrix -------------------------------------------

TAMPER_MATRIX = (
    ("pk_s", 1, wire.TAG_PUBKEY, (InvalidPoint,)),
    ("n_s", 1, wire.TAG_NONCE, (BindingMismatch,)),
    ("Q_s", 1, wire.TAG_QUOTE, (SignatureInvalid, MeasurementMismatch)),
    ("pk_d", 2, wire.TAG_PUBKEY, (InvalidPoint,)),
    ("pi_d", 2, wire.TAG_POLICY_DIGEST, (BindingMismatch,)),
    ("n_d", 2, wire.TAG_NONCE, (BindingMismatch,)),
    ("Q_d", 2, wire.TAG_QUOTE, (SignatureInvalid,)),
    ("mac", 3, wire.TAG_CONFIRM_MAC, (ConfirmationFailed,)),
)


def _field_len(flight_bytes: bytes, tag: int) -> int:
    return len(wire.decode_flight(flight_bytes).fields[tag])


def test_criterion_02_tamper_matrix_800_runs():
    pair = NodePair()
    rng = random.Random(202)
    for name, flight_no, tag, allowed in TAMPER_MATRIX:
        completions = 0
        rejections = 0
        for _ in range(100):
            state, f1 = hs.initiate(pair.node_a, *pair.addr_b)
            try:
                if flight_no == 1:
                    f1 = flip_field(f1, tag,
                                    rng.randrange(_field_len(f1, tag)))
                rstate, f2 = hs.respond(pair.node_b, f1)
                if flight_no == 2:
                    f2 = flip_field(f2, tag,
                                    rng.randrange(_field_len(f2, tag)))
                mat_a, f3 = hs.finalize_initiator(state, pair.node_a, f2)
                if flight_no == 3:
                    f3 = flip_field(f3, tag,
                                    rng.randrange(_field_len(f3, tag)))
                hs.finalize_responder(rstate, pair.node_b, f3)
                completions += 1
            except allowed:
                rejections += 1
        assert completions == 0, f"{name}: {completions} tampered completions"
        assert rejections == 100, name


# --- 3: unauthorized binary --------------------------------------------------

def test_criterion_03_unlisted_measurement_rejected_100_runs():
    pair = NodePair()
    mu_c = measurement_of(b"unlisted intruder binary")
    addr_c = ("127.0.0.1", 7009)
    node_c = build_node(NodeIdentity(mu_c, PROXY_DIGEST), endpoint=addr_c,
                        authority=pair.authority, clock=SimClock())
    # the intruder carries its own bundle that happens to list B
    node_c.policy.verify_and_install(
        make_bundle(1, {mu_c: addr_c, pair.mu_b: pair.addr_b}))
    rejected = 0
    for _ in range(100):
        state, f1 = hs.initiate(node_c, *pair.addr_b)
        with pytest.raises(AttestationRejected) as info:
            hs.respond(pair.node_b, f1)
        assert isinstance(info.value, MeasurementMismatch)
        state.destroy()
        rejected += 1
    assert rejected == 100


# --- 4: epoch discipline ------------------------------------------------------

def test_criterion_04a_downgrade_install_rejected_100_runs():
    pair = NodePair(epoch=50)
    rng = random.Random(404)
    rejected = 0
    for _ in range(100):
        stale = rng.randrange(0, 51)  # anything <= the active epoch
        with pytest.raises(EpochDowngrade):
            pair.node_a.policy.verify_and_install(pair.bundle(stale))
        rejected += 1
    assert rejected == 100
    assert pair.node_a.policy.index.epoch == 50


def test_criterion_04b_cross_epoch_handshake_aborts_100_runs():
    pair = NodePair()
    aborted = 0
    for i in range(100):
        pair.node_a.policy.verify_and_install(pair.bundle(2 * i + 2))
        pair.node_b.policy.verify_and_install(pair.bundle(2 * i + 3))
        state, f1 = hs.initiate(pair.node_a, *pair.addr_b)
        with pytest.raises(EpochMismatch):
            hs.respond(pair.node_b, f1)
        state.destroy()
        aborted += 1
    assert aborted == 100


def _chunk(seq: int, size: int) -> bytes:
    body = hashlib.sha384(b"transfer chunk %d" % seq).digest()
    reps = -(-size // len(body))
    return (b"%06d" % seq) + (body * reps)[:size - 6]


def _timed_transfer(rig, *, chunks: int, chunk_bytes: int, rate_hz: float,
                    roll_at: int | None = None) -> float:
    """Reliable paced transfer through the tunnel; returns wall seconds.

    Every chunk must come back byte-identical or the assertion fails, which
    is the zero-loss check: retransmits give reliability, equality gives
    integrity.
    """
    app = rig.app
    app.settimeout(0.02)
    acked: set[int] = set()
    pending = collections.deque(range(chunks))
    inflight: dict[int, float] = {}
    rolled = roll_at is None
    sent = 0
    t0 = time.perf_counter()
    deadline = t0 + 4 * chunks / rate_hz + 30
    while len(acked) < chunks:
        now = time.perf_counter()
        assert now < deadline, f"transfer stalled at {len(acked)}/{chunks}"
        credit = min(int((now - t0) * rate_hz) - sent, 96)
        while credit > 0 and pending:
            seq = pending.popleft()
            if seq in acked:
                continue
            app.sendto(_chunk(seq, chunk_bytes), rig.plain_a)
            inflight[seq] = now
            sent += 1
            credit -= 1
        if not rolled and len(acked) >= roll_at:
            replies = rig.roll_both(2)
            assert all(r.get("ok") for r in replies), replies
            rolled = True
        try:
            while True:
                data, _ = app.recvfrom(65535)
                try:
                    seq = int(data[:6])
                except ValueError:
                    continue
                if seq in acked:
                    continue
                assert data == _chunk(seq, chunk_bytes), f"chunk {seq} corrupted"
                acked.add(seq)
                inflight.pop(seq, None)
        except OSError:
            pass
        for seq, sent_at in list(inflight.items()):
            if now - sent_at > 0.35:
                pending.append(seq)
                inflight[seq] = now
    return time.perf_counter() - t0


def test_criterion_04c_rollover_transfer_zero_loss_small_penalty():
    chunk_bytes = 1400
    chunks = 7143  # just over 10 MB of application bytes
    assert chunks * chunk_bytes >= 10_000_000
    rate = 550.0

    with TunnelRig(warmup=0) as rig:
        assert rig.pump(3, tag=b"warm") == 3
        baseline = _timed_transfer(rig, chunks=chunks,
                                   chunk_bytes=chunk_bytes, rate_hz=rate)
    with TunnelRig(warmup=0) as rig:
        assert rig.pump(3, tag=b"warm") == 3
        rolled = _timed_transfer(rig, chunks=chunks, chunk_bytes=chunk_bytes,
                                 rate_hz=rate, roll_at=chunks // 2)
        assert rig.tunnel_a.active_epoch == 2

    penalty = (rolled - baseline) / baseline
    assert penalty < 0.05, (
        f"rollover penalty {penalty * 100:.2f}% "
        f"(baseline {baseline:.2f}s, with rollover {rolled:.2f}s)")


# --- 5: nonce uniqueness and rekey latch -------------------------------------

def test_criterion_05_million_packets_no_nonce_reuse():
    pair = NodePair()
    threshold = 2 ** 16
    lanes = 4
    total = 1_000_000
    table = FlowKeyTable(lanes=lanes, rekey_threshold=threshold)
    table.policy = pair.node_a.policy.index
    mat_a, _ = run_handshake(pair)
    table.install(mat_a)

    seen: set[int] = set()
    generations = [(mat_a.key_id, mat_a.initiator_prefix)]
    rekeys = 0
    payload = b"p" * 16
    ip, port = pair.addr_b
    for i in range(total):
        result = table.seal(ip, port, payload, i % lanes, epoch=1)
        assert result.verdict is Verdict.SEALED
        _, epoch, key_id, lane, counter, _ = HEADER.unpack(
            result.frame[:HEADER_LEN])
        seen.add((key_id << 48) | (lane << 32) | counter)
        if result.rekey_required:
            rekeys += 1
            fresh, _ = run_handshake(pair)
            table.install(fresh)
            generations.append((fresh.key_id, fresh.initiator_prefix))

    assert len(seen) == total, "duplicate (key, nonce) pair on the wire"
    # balanced lanes cross the per-lane threshold this many times
    assert rekeys == total // (lanes * threshold) == 3
    assert len(set(generations)) == len(generations) == rekeys + 1


# --- 6: frame authentication -------------------------------------------------

def test_criterion_06_exhaustive_bit_flips_and_round_trips():
    pair = NodePair()
    mat_a, mat_b = run_handshake(pair)
    sender = FlowKeyTable(lanes=4)
    sender.policy = pair.node_a.policy.index
    sender.install(mat_a)
    receiver = FlowKeyTable(lanes=4)
    receiver.policy = pair.node_b.policy.index
    receiver.install(mat_b)

    rng = random.Random(606)
    frames = []
    for i in range(1_000):
        inner = rng.randbytes(rng.randrange(8, 33))
        result = sender.seal(*pair.addr_b, inner, i % 4, epoch=1)
        frames.append(result.frame)

    flips = 0
    for frame in frames:
        for bit in range(len(frame) * 8):
            bad = bytearray(frame)
            bad[bit // 8] ^= 1 << (bit % 8)
            with pytest.raises(AuthFailed):
                receiver.open(bytes(bad), pair.addr_a)
            flips += 1
    assert flips == sum(len(f) * 8 for f in frames)

    # untampered round trips, both directions, payloads up to the inner MTU
    for i in range(10_000):
        inner = rng.randbytes(rng.randrange(0, 1433))
        if i % 2 == 0:
            sealed = sender.seal(*pair.addr_b, inner, i % 4, epoch=1)
            opened, _ = receiver.open(sealed.frame, pair.addr_a)
        else:
            sealed = receiver.seal(*pair.addr_a, inner, i % 4, epoch=1)
            opened, _ = sender.open(sealed.frame, pair.addr_b)
        assert opened == inner


# --- 7 to 10: initialization and transfer models -----------------------------

def test_criterion_07_closed_form_reference_points():
    assert closed_form_init(200, 16, 32, 103.2) == 10_320.0
    assert closed_form_init(100, 3.5, 32, 103.2) < 1_500.0


def test_criterion_08_monte_carlo_reference_points_100k():
    started = time.perf_counter()
    cases = [
        (64, 2, 32, {"p50": 440.0, "p95": 530.0}),
        (100, 3, 32, {"p50": 1_020.0}),
        (200, 4, 32, {"p50": 2_730.0}),
        (128, 127, 32, {"p50": 55_410.0}),
    ]
    for nodes, degree, hosts, expected in cases:
        summary, _ = simulate_init(nodes, degree, hosts, trials=100_000,
                                   seed=20260823)
        for stat, target in expected.items():
            value = getattr(summary, stat)
            assert value == pytest.approx(target, rel=0.15), (
                f"{nodes} nodes degree {degree}: {stat}={value:.1f} "
                f"vs {target} +/-15%")
    assert time.perf_counter() - started < 120.0


def test_criterion_09_dag_makespan_reference_points_100k():
    for shape, target in (("one-level", 210.0), ("two-level", 450.0),
                          ("twenty-node-mixed", 850.0)):
        summary, _ = simulate_dag_init(named_dag(shape), trials=100_000,
                                       seed=20260823)
        assert summary.p50 == pytest.approx(target, rel=0.10), (
            f"{shape}: P50={summary.p50:.1f} vs {target} +/-10%")
    lossy = Impairments(loss_probability=0.001, min_rto_ms=200.0)
    summary, _ = simulate_dag_init(named_dag("twenty-node-mixed"),
                                   impairments=lossy, trials=100_000,
                                   seed=20260823)
    assert summary.p99 == pytest.approx(1_050.0, rel=0.15), (
        f"lossy P99={summary.p99:.1f} vs 1050 +/-15%")


def test_criterion_10_dag_replay_overhead_bracket():
    dag = named_dag("mosaic-100")
    assert len(dag.nodes) == 100
    assert sum(nbytes for _, _, nbytes in dag.edges) == 600_000_000
    result = replay_dag_transfers(dag, TransferCostModel(
        per_packet_cost_us=6.0, inner_mtu_bytes=1432, flow_gbps=0.125))
    assert 4.0 <= result.overhead_pct <= 9.0, result


# --- 11: confidentiality on the wire -----------------------------------------

def test_criterion_11_no_plaintext_on_captured_path():
    needle = b"TOP-SECRET-TRAINING-TENSOR"
    relay, rig = relayed_rig(warmup=0)
    try:
        assert rig.pump(120, tag=needle, payload_pad=1200) == 120
        captured_frames = [data for _, data in relay.captured]
        assert len(captured_frames) >= 240  # both directions
        everything = b"".join(captured_frames) + b"".join(
            payload for _, _, payload in relay.flights)
        assert needle not in everything
        assert b"\x5a" * 64 not in everything  # the padding run stays hidden

        ciphertext = b"".join(f[HEADER_LEN:] for f in captured_frames
                              if len(f) > HEADER_LEN + TAG_LEN)
        total_bits = len(ciphertext) * 8
        assert total_bits > 1_000_000
        ones = int.from_bytes(ciphertext, "big").bit_count()
        bias = abs(2 * ones - total_bits) / total_bits
        assert bias < 0.01, f"monobit bias {bias * 100:.3f}%"
    finally:
        relay.stop()
        rig.close()


# --- 12: liveness backstop ---------------------------------------------------

def test_criterion_12_deferred_queue_bound_forces_reset():
    report = scenarios.run("stalled-lane", seed=0)
    jsonschema.validate(report, scenarios.REPORT_SCHEMA)
    outcomes = {a["name"]: a["ok"] for a in report["assertions"]}
    assert report["passed"], [n for n, ok in outcomes.items() if not ok]
    for name in ("queue primed to capacity",
                 "forced reset triggered exactly once",
                 "deferred queue peaked at the bound",
                 "flush came from the capacity bound",
                 "stale keys zeroized",
                 "active-epoch flow continues (>= 99%)",
                 "no process abort"):
        assert outcomes[name], name
