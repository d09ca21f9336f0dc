"""Per-packet seal/open: framing, nonce discipline, replay windows, rekey
signaling, and the authorization verdicts."""
import struct
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import NodePair, run_handshake
from janus import dataplane as dp
from janus.errors import (
    AuthFailed,
    EpochTooOld,
    HandshakeRefused,
    ReplayDetected,
    UnknownKey,
    ValidationError,
)


def linked_tables(pair: NodePair):
    """Both directions keyed and installed, policy wired in."""
    mat_a, mat_b = run_handshake(pair)
    table_a = dp.FlowKeyTable()
    table_a.policy = pair.node_a.policy.index
    table_b = dp.FlowKeyTable()
    table_b.policy = pair.node_b.policy.index
    entry_a = table_a.install(mat_a)
    entry_b = table_b.install(mat_b)
    return table_a, table_b, entry_a, entry_b


@pytest.fixture
def net(pair):
    return pair, linked_tables(pair)


# --- framing and round trips -------------------------------------------------

def test_frame_overhead_budget():
    assert dp.HEADER_LEN == 24
    assert dp.TAG_LEN == 16
    assert dp.DEFAULT_INNER_BUDGET == 1432
    # a full frame plus outer IPv4/UDP headers exactly fills a 1500 MTU
    assert dp.DEFAULT_INNER_BUDGET + dp.HEADER_LEN + dp.TAG_LEN \
        + dp.IP_UDP_OVERHEAD == 1500
    assert dp.inner_budget(9000) == 8932
    with pytest.raises(ValidationError):
        dp.inner_budget(60)


def test_seal_open_round_trip(net):
    pair, (table_a, table_b, _, _) = net
    result = table_a.seal(*pair.addr_b, b"hello tunnel", 0, epoch=1)
    assert result.verdict is dp.Verdict.SEALED
    assert result.frame is not None and not result.rekey_required
    assert len(result.frame) == dp.HEADER_LEN + 12 + dp.TAG_LEN
    inner, entry = table_b.open(result.frame, pair.addr_a)
    assert inner == b"hello tunnel"
    assert entry.epoch == 1


def test_both_directions_share_one_key_without_nonce_overlap(net):
    pair, (table_a, table_b, entry_a, entry_b) = net
    assert entry_a.key_view == entry_b.key_view
    nonces = set()
    for i in range(50):
        r = table_a.seal(*pair.addr_b, b"a%d" % i, i % 4, epoch=1)
        table_b.open(r.frame, pair.addr_a)
        nonces.add(_frame_nonce(r.frame, entry_a.seal_prefix))
        r = table_b.seal(*pair.addr_a, b"b%d" % i, i % 4, epoch=1)
        table_a.open(r.frame, pair.addr_b)
        nonces.add(_frame_nonce(r.frame, entry_b.seal_prefix))
    assert len(nonces) == 100


def _frame_nonce(frame: bytes, prefix: bytes) -> bytes:
    _, _, _, lane, counter, _ = dp.HEADER.unpack(frame[:dp.HEADER_LEN])
    return dp.compose_nonce(lane, prefix, counter)


def test_header_carries_lane_and_counter(net):
    pair, (table_a, _, entry_a, _) = net
    for expect_counter in range(3):
        result = table_a.seal(*pair.addr_b, b"x", 2, epoch=1)
        magic, epoch, key_id, lane, counter, inner_len = dp.HEADER.unpack(
            result.frame[:dp.HEADER_LEN])
        assert magic == b"JNS1"
        assert epoch == 1
        assert key_id == entry_a.key_id
        assert lane == 2
        assert counter == expect_counter
        assert inner_len == 1


def test_nonce_layout():
    nonce = dp.compose_nonce(3, b"\xAB" * 6, 0x01020304)
    assert nonce == b"\x00\x03" + b"\xAB" * 6 + b"\x01\x02\x03\x04"
    assert len(nonce) == 12


def test_inner_length_budget_enforced(net):
    pair, (table_a, _, _, _) = net
    table_a.seal(*pair.addr_b, b"\x00" * 1432, 0, epoch=1)
    with pytest.raises(ValidationError, match="budget"):
        table_a.seal(*pair.addr_b, b"\x00" * 1433, 0, epoch=1)


_ROUND_TRIP_STATE = {}


@given(payload=st.binary(min_size=0, max_size=1432),
       lane=st.integers(0, 3))
@settings(max_examples=150, deadline=None)
def test_round_trip_arbitrary_payloads(payload, lane):
    if "net" not in _ROUND_TRIP_STATE:
        pair = NodePair()
        _ROUND_TRIP_STATE["net"] = (pair, linked_tables(pair))
    pair, (table_a, table_b, _, _) = _ROUND_TRIP_STATE["net"]
    result = table_a.seal(*pair.addr_b, payload, lane, epoch=1)
    inner, _ = table_b.open(result.frame, pair.addr_a)
    assert inner == payload


# --- tampering ---------------------------------------------------------------

def test_every_bit_flip_is_rejected(net):
    """One sealed frame, every bit flipped in turn: nothing decrypts and
    nothing raises outside the authentication-failure family."""
    pair, (table_a, table_b, _, _) = net
    result = table_a.seal(*pair.addr_b, b"\x11" * 32, 1, epoch=1)
    frame = bytearray(result.frame)
    for bit in range(len(frame) * 8):
        frame[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(AuthFailed):
            table_b.open(bytes(frame), pair.addr_a)
        frame[bit // 8] ^= 1 << (bit % 8)
    # the pristine frame still opens: rejection consumed no replay state
    inner, _ = table_b.open(bytes(frame), pair.addr_a)
    assert inner == b"\x11" * 32


def test_truncated_and_oversized_frames_rejected(net):
    pair, (table_a, table_b, _, _) = net
    frame = table_a.seal(*pair.addr_b, b"payload", 0, epoch=1).frame
    for bad in (frame[:10], frame[:-1], frame + b"\x00", b""):
        with pytest.raises(AuthFailed):
            table_b.open(bad, pair.addr_a)


# --- replay protection -------------------------------------------------------

def test_duplicate_frame_detected(net):
    pair, (table_a, table_b, _, _) = net
    frame = table_a.seal(*pair.addr_b, b"once", 0, epoch=1).frame
    table_b.open(frame, pair.addr_a)
    with pytest.raises(ReplayDetected):
        table_b.open(frame, pair.addr_a)


def test_out_of_order_within_window_accepted(net):
    pair, (table_a, table_b, _, _) = net
    frames = [table_a.seal(*pair.addr_b, b"%d" % i, 0, epoch=1).frame
              for i in range(5)]
    for frame in (frames[4], frames[1], frames[3], frames[0], frames[2]):
        table_b.open(frame, pair.addr_a)
    for frame in frames:
        with pytest.raises(ReplayDetected):
            table_b.open(frame, pair.addr_a)


def test_window_slides_and_expels_old_counters(net):
    pair, (table_a, table_b, _, _) = net
    early = table_a.seal(*pair.addr_b, b"early", 0, epoch=1).frame
    for i in range(dp.REPLAY_WINDOW + 1):
        frame = table_a.seal(*pair.addr_b, b"fill", 0, epoch=1).frame
        table_b.open(frame, pair.addr_a)
    # counter 0 now sits below the window: rejected without decryption
    with pytest.raises(ReplayDetected):
        table_b.open(early, pair.addr_a)


def test_replay_check_happens_before_decryption(net):
    pair, (table_a, table_b, _, _) = net
    frame = table_a.seal(*pair.addr_b, b"x", 0, epoch=1).frame
    table_b.open(frame, pair.addr_a)
    # same counter, garbage tag: replay wins over authentication
    forged = frame[:-16] + b"\x00" * 16
    with pytest.raises(ReplayDetected):
        table_b.open(forged, pair.addr_a)


def test_failed_decryption_does_not_advance_window(net):
    pair, (table_a, table_b, _, _) = net
    frame = table_a.seal(*pair.addr_b, b"x", 0, epoch=1).frame
    forged = frame[:-1] + bytes([frame[-1] ^ 1])
    with pytest.raises(AuthFailed):
        table_b.open(forged, pair.addr_a)
    inner, _ = table_b.open(frame, pair.addr_a)  # genuine copy still lands
    assert inner == b"x"


# --- lanes and counters ------------------------------------------------------

def test_lanes_count_independently(net):
    pair, (table_a, _, entry_a, _) = net
    for _ in range(3):
        table_a.seal(*pair.addr_b, b"x", 0, epoch=1)
    table_a.seal(*pair.addr_b, b"x", 3, epoch=1)
    assert entry_a.counter_snapshot() == [3, 0, 0, 1]


def test_lane_out_of_range(net):
    pair, (table_a, table_b, _, _) = net
    with pytest.raises(ValidationError):
        table_a.seal(*pair.addr_b, b"x", 4, epoch=1)
    frame = bytearray(table_a.seal(*pair.addr_b, b"x", 0, epoch=1).frame)
    struct.pack_into(">H", frame, 16, 9)  # forge lane 9 of 4
    with pytest.raises(AuthFailed):
        table_b.open(bytes(frame), pair.addr_a)


def test_rekey_signal_raised_exactly_once():
    pair = NodePair()
    mat_a, mat_b = run_handshake(pair)
    table_a = dp.FlowKeyTable(rekey_threshold=2**10)
    table_a.policy = pair.node_a.policy.index
    table_a.install(mat_a)
    signals = []
    for i in range(2**10 + 50):
        r = table_a.seal(*pair.addr_b, b"x", 0, epoch=1)
        if r.rekey_required:
            signals.append(i)
    assert signals == [2**10 - 1]


def test_counter_exhaustion_refuses_to_seal(net):
    pair, (table_a, _, entry_a, _) = net
    entry_a._counters[0] = dp.COUNTER_LIMIT
    r = table_a.seal(*pair.addr_b, b"last one", 0, epoch=1)
    assert r.verdict is dp.Verdict.SEALED
    with pytest.raises(ValidationError, match="exhausted"):
        table_a.seal(*pair.addr_b, b"too far", 0, epoch=1)


# --- verdicts and key lookup -------------------------------------------------

def test_unauthorized_destination_denied(net):
    pair, (table_a, _, _, _) = net
    result = table_a.seal("203.0.113.7", 7000, b"x", 0, epoch=1)
    assert result.verdict is dp.Verdict.DENY
    assert result.frame is None


def test_authorized_destination_without_key_pends(pair):
    table = dp.FlowKeyTable()
    table.policy = pair.node_a.policy.index
    result = table.seal(*pair.addr_b, b"x", 0, epoch=1)
    assert result.verdict is dp.Verdict.KEY_PENDING


def test_unknown_key_id(net):
    pair, (table_a, table_b, _, _) = net
    frame = bytearray(table_a.seal(*pair.addr_b, b"x", 0, epoch=1).frame)
    struct.pack_into(">I", frame, 12, 0xDEADBEEF)
    with pytest.raises(UnknownKey):
        table_b.open(bytes(frame), pair.addr_a)


def test_flushed_epoch_reported_distinctly(net):
    pair, (table_a, table_b, _, entry_b) = net
    frame = table_a.seal(*pair.addr_b, b"x", 0, epoch=1).frame
    table_b.drop(entry_b)
    with pytest.raises(UnknownKey):
        table_b.open(frame, pair.addr_a)  # key gone, epoch not yet flushed
    table_b.mark_epoch_flushed(1)
    with pytest.raises(EpochTooOld):
        table_b.open(frame, pair.addr_a)


def test_source_binding_rejects_spoofed_origin(net):
    pair, (table_a, table_b, _, _) = net
    frame = table_a.seal(*pair.addr_b, b"x", 0, epoch=1).frame
    with pytest.raises(UnknownKey):
        table_b.open(frame, ("127.0.0.1", 9999))
    with pytest.raises(UnknownKey):
        table_b.open(frame, ("10.2.3.4", pair.addr_a[1]))
    table_b.open(frame, pair.addr_a)


def test_source_learned_from_first_authenticated_frame(pair):
    mat_a, mat_b = run_handshake(pair)
    mat_b.peer = None  # as if the reverse endpoint were not in policy
    table_a = dp.FlowKeyTable()
    table_a.policy = pair.node_a.policy.index
    table_b = dp.FlowKeyTable()
    table_b.policy = pair.node_b.policy.index
    table_a.install(mat_a)
    entry_b = table_b.install(mat_b)
    assert entry_b.peer is None
    frame = table_a.seal(*pair.addr_b, b"hi", 0, epoch=1).frame
    table_b.open(frame, pair.addr_a)
    assert entry_b.peer == pair.addr_a
    # learned binding is enforced from the second frame on
    frame2 = table_a.seal(*pair.addr_b, b"again", 0, epoch=1).frame
    with pytest.raises(UnknownKey):
        table_b.open(frame2, ("127.0.0.1", 9999))
    table_b.open(frame2, pair.addr_a)
    # and the responder can now seal back over the learned flow
    back = table_b.seal(*pair.addr_a, b"reply", 0, epoch=1)
    assert back.verdict is dp.Verdict.SEALED
    inner, _ = table_a.open(back.frame, pair.addr_b)
    assert inner == b"reply"


def test_reinstall_replaces_and_destroys_previous_entry(pair):
    mat_1, _ = run_handshake(pair)
    mat_2, _ = run_handshake(pair)
    table = dp.FlowKeyTable()
    table.policy = pair.node_a.policy.index
    entry_1 = table.install(mat_1)
    entry_2 = table.install(mat_2)
    assert entry_1.destroyed and not entry_2.destroyed
    assert entry_1.key_view == b"\x00" * 32
    assert table.active_entry(*pair.addr_b, 1) is entry_2


def test_install_lock_budget(pair):
    mat_a, _ = run_handshake(pair)
    table = dp.FlowKeyTable()
    table.policy = pair.node_a.policy.index
    table._lock.acquire()  # someone is holding the cache lock
    try:
        with pytest.raises(HandshakeRefused):
            table.install(mat_a)
    finally:
        table._lock.release()
    table.install(mat_a)  # and with the lock free it goes through


# --- cost records ------------------------------------------------------------

def test_seal_and_open_cost_records(net):
    pair, (table_a, table_b, _, _) = net
    result = table_a.seal(*pair.addr_b, b"measure me", 0, epoch=1,
                          record_cost=True)
    cost = result.cost
    assert cost is not None
    assert cost.total_ns == cost.lookup_ns + cost.crypto_ns
    assert cost.total_ns > 0
    inner, _, open_cost = table_b.open(result.frame, pair.addr_a,
                                       record_cost=True)
    assert inner == b"measure me"
    assert open_cost.total_ns >= open_cost.crypto_ns > 0
    plain = table_a.seal(*pair.addr_b, b"no meter", 0, epoch=1)
    assert plain.cost is None
