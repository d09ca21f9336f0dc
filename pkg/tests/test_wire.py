"""Flight framing: strict encode/decode symmetry and hostile-input rejection."""
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from janus import wire
from janus.errors import MalformedFlight

FIELDS = [
    (wire.TAG_PUBKEY, b"\x04" + b"\x11" * 96),
    (wire.TAG_NONCE, b"\x22" * 32),
    (wire.TAG_QUOTE, b"\x33" * 376),
]


def test_round_trip():
    raw = wire.encode_flight(1, 42, FIELDS)
    flight = wire.decode_flight(raw)
    assert flight.flight_no == 1
    assert flight.epoch == 42
    assert flight.fields == dict(FIELDS)
    assert not flight.is_abort


def test_header_layout():
    raw = wire.encode_flight(2, 7, [])
    assert raw[:4] == b"MAKE"
    assert raw[4] == 1  # version
    assert raw[5] == 2  # flight number
    assert struct.unpack_from("<Q", raw, 6)[0] == 7
    assert len(raw) == 16


def test_abort_round_trip():
    raw = wire.encode_abort(9, 4)
    flight = wire.decode_flight(raw)
    assert flight.is_abort
    assert flight.epoch == 9
    assert wire.abort_reason(flight) == 4


def test_abort_reason_requires_u16():
    flight = wire.decode_flight(wire.encode_flight(wire.ABORT_FLIGHT, 0, [
        (wire.TAG_ABORT_REASON, b"\x01")
    ]))
    with pytest.raises(MalformedFlight):
        wire.abort_reason(flight)
    with pytest.raises(MalformedFlight):
        wire.abort_reason(wire.decode_flight(wire.encode_flight(3, 0, [])))


@pytest.mark.parametrize("mangle,why", [
    (lambda raw: raw[:10], "truncated header"),
    (lambda raw: b"FAKE" + raw[4:], "bad magic"),
    (lambda raw: raw[:4] + b"\x02" + raw[5:], "bad version"),
    (lambda raw: raw + b"\x00", "trailing byte"),
    (lambda raw: raw[:-1], "truncated last field"),
    (lambda raw: raw[:17], "truncated field header"),
])
def test_malformed_flights_rejected(mangle, why):
    raw = wire.encode_flight(1, 42, FIELDS)
    with pytest.raises(MalformedFlight):
        wire.decode_flight(mangle(raw))


def test_unknown_and_duplicate_tags_rejected():
    with pytest.raises(MalformedFlight, match="unknown tag"):
        wire.decode_flight(wire.encode_flight(1, 0, [(99, b"x")]))
    with pytest.raises(MalformedFlight, match="duplicate tag"):
        wire.decode_flight(wire.encode_flight(1, 0, [
            (wire.TAG_NONCE, b"a"), (wire.TAG_NONCE, b"b")
        ]))


def test_oversized_field_length_rejected():
    # header claims a length far past the buffer; also past the hard cap
    raw = wire.encode_flight(1, 0, [])
    forged = raw[:14] + struct.pack("<H", 1) + struct.pack(
        "<HI", wire.TAG_NONCE, 1 << 24)
    with pytest.raises(MalformedFlight):
        wire.decode_flight(forged)


def test_empty_field_value_is_legal():
    flight = wire.decode_flight(
        wire.encode_flight(1, 0, [(wire.TAG_POLICY_DIGEST, b"")]))
    assert flight.fields[wire.TAG_POLICY_DIGEST] == b""


@given(
    st.integers(0, 255),
    st.integers(0, 2**64 - 1),
    st.lists(
        st.tuples(st.sampled_from(sorted({1, 2, 3, 4, 5, 6})),
                  st.binary(max_size=400)),
        max_size=6,
        unique_by=lambda f: f[0],
    ),
)
@settings(max_examples=200, deadline=None)
def test_round_trip_property(flight_no, epoch, fields):
    flight = wire.decode_flight(wire.encode_flight(flight_no, epoch, fields))
    assert flight.flight_no == flight_no
    assert flight.epoch == epoch
    assert flight.fields == dict(fields)


@given(st.binary(max_size=64))
@settings(max_examples=200, deadline=None)
def test_random_bytes_never_crash_decoder(raw):
    try:
        wire.decode_flight(raw)
    except MalformedFlight:
        pass  # the only acceptable failure mode
