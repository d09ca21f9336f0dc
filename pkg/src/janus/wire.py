"""Key-exchange flight encoding.

Fixed binary framing carried over a reliable stream:

    "MAKE" | version u8 = 1 | flight_no u8 | epoch u64 | count u16 | field*
    field := tag u16 | len u32 | bytes

All integers little-endian. Abort frames use flight number 255 and carry a
single u16 reason code under tag 6. Decoding is strict: unknown tags,
duplicate tags, truncation, or trailing bytes all reject the flight.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import MalformedFlight

MAGIC = b"MAKE"
VERSION = 1
ABORT_FLIGHT = 255

TAG_PUBKEY = 1
TAG_NONCE = 2
TAG_QUOTE = 3
TAG_POLICY_DIGEST = 4
TAG_CONFIRM_MAC = 5
TAG_ABORT_REASON = 6

_KNOWN_TAGS = {TAG_PUBKEY, TAG_NONCE, TAG_QUOTE, TAG_POLICY_DIGEST,
               TAG_CONFIRM_MAC, TAG_ABORT_REASON}

_HEADER = struct.Struct("<4sBBQH")
_FIELD = struct.Struct("<HI")

# No legitimate field comes close to this; bounds memory for hostile input.
_MAX_FIELD_LEN = 1 << 20


@dataclass(frozen=True)
class Flight:
    flight_no: int
    epoch: int
    fields: dict[int, bytes]

    @property
    def is_abort(self) -> bool:
        return self.flight_no == ABORT_FLIGHT


def encode_flight(flight_no: int, epoch: int, fields: list[tuple[int, bytes]]) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, flight_no, epoch, len(fields))]
    for tag, value in fields:
        parts.append(_FIELD.pack(tag, len(value)))
        parts.append(value)
    return b"".join(parts)


def encode_abort(epoch: int, reason_code: int) -> bytes:
    reason = struct.pack("<H", reason_code)
    return encode_flight(ABORT_FLIGHT, epoch, [(TAG_ABORT_REASON, reason)])


def decode_flight(raw: bytes) -> Flight:
    if len(raw) < _HEADER.size:
        raise MalformedFlight("flight shorter than fixed header")
    magic, version, flight_no, epoch, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MalformedFlight("bad magic")
    if version != VERSION:
        raise MalformedFlight(f"unsupported version {version}")
    fields: dict[int, bytes] = {}
    offset = _HEADER.size
    for _ in range(count):
        if offset + _FIELD.size > len(raw):
            raise MalformedFlight("truncated field header")
        tag, length = _FIELD.unpack_from(raw, offset)
        offset += _FIELD.size
        if tag not in _KNOWN_TAGS:
            raise MalformedFlight(f"unknown tag {tag}")
        if tag in fields:
            raise MalformedFlight(f"duplicate tag {tag}")
        if length > _MAX_FIELD_LEN or offset + length > len(raw):
            raise MalformedFlight("field length exceeds flight")
        fields[tag] = raw[offset:offset + length]
        offset += length
    if offset != len(raw):
        raise MalformedFlight("trailing bytes after field table")
    return Flight(flight_no=flight_no, epoch=epoch, fields=fields)


def abort_reason(flight: Flight) -> int:
    raw = flight.fields.get(TAG_ABORT_REASON, b"")
    if len(raw) != 2:
        raise MalformedFlight("abort flight lacks a u16 reason")
    return struct.unpack("<H", raw)[0]
