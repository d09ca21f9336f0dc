"""Adversarial interposer for two nodes on loopback.

The relay owns two endpoints: face_b impersonates node B toward A, face_a
impersonates A toward B. Policies under test pin each peer at the matching
face, so every UDP frame and every key-exchange flight crosses the relay,
where hooks may observe, mutate, drop, duplicate, or delay. Forwarding is
crossed: traffic arriving on one face leaves through the other, so each
node always sees its peer at the pinned address.

Hook contracts:
    on_flight(direction, flight_no, data) -> bytes | None   (None drops)
    on_frame(direction, data) -> iterable of bytes          (() drops)
direction is "a2b" or "b2a". Flights are numbered in protocol order per
connection: 1 and 3 travel from the connecting side, 2 from the target.
"""
from __future__ import annotations

import socket
import struct
import threading
import time

from . import wire

LOOP = "127.0.0.1"
_RECV_TIMEOUT_S = 0.05
_MAX_FLIGHT = 1 << 20


def free_loopback_port() -> int:
    """A port currently free for both TCP and UDP."""
    for _ in range(50):
        tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        tcp.bind((LOOP, 0))
        port = tcp.getsockname()[1]
        udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            udp.bind((LOOP, port))
        except OSError:
            continue
        finally:
            tcp.close()
            udp.close()
        return port
    raise RuntimeError("no free loopback port")


def flip_field(flight_bytes: bytes, tag: int, offset: int = 0) -> bytes:
    """Re-encode a flight with one byte of the tagged field inverted."""
    flight = wire.decode_flight(flight_bytes)
    if tag not in flight.fields:
        raise KeyError(f"flight {flight.flight_no} has no tag {tag}")
    fields = []
    for t, value in flight.fields.items():
        if t == tag:
            mutated = bytearray(value)
            mutated[offset] ^= 0xFF
            value = bytes(mutated)
        fields.append((t, value))
    return wire.encode_flight(flight.flight_no, flight.epoch, fields)


def flip_frame_bit(frame: bytes, bit_index: int) -> bytes:
    out = bytearray(frame)
    out[bit_index // 8] ^= 1 << (bit_index % 8)
    return bytes(out)


class Relay:
    """Transparent man-in-the-middle between two real node addresses."""

    def __init__(self, a_real: tuple[str, int], b_real: tuple[str, int], *,
                 on_flight=None, on_frame=None):
        self.a_real = a_real
        self.b_real = b_real
        self.on_flight = on_flight
        self.on_frame = on_frame
        self.partitioned = False
        self.captured: list[tuple[str, bytes]] = []
        self.flights: list[tuple[str, int, bytes]] = []
        self.counters = {"frames_a2b": 0, "frames_b2a": 0, "frames_dropped": 0,
                         "flights": 0, "flights_dropped": 0, "tcp_refused": 0}
        self.face_a = (LOOP, free_loopback_port())  # B talks to this
        self.face_b = (LOOP, free_loopback_port())  # A talks to this
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._lock = threading.Lock()
        self._udp_a: socket.socket | None = None
        self._udp_b: socket.socket | None = None
        self._tcp_a: socket.socket | None = None
        self._tcp_b: socket.socket | None = None

    # --- lifecycle ----------------------------------------------------------

    def start(self) -> "Relay":
        self._udp_a = self._udp(self.face_a)
        self._udp_b = self._udp(self.face_b)
        self._tcp_a = self._tcp(self.face_a)
        self._tcp_b = self._tcp(self.face_b)
        # crossed forwarding keeps source addresses consistent with policy
        self._spawn(self._udp_pump, self._udp_b, self._udp_a, self.b_real,
                    "a2b")
        self._spawn(self._udp_pump, self._udp_a, self._udp_b, self.a_real,
                    "b2a")
        self._spawn(self._accept, self._tcp_b, self.b_real, "a2b")
        self._spawn(self._accept, self._tcp_a, self.a_real, "b2a")
        return self

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=2)
        for sock in (self._udp_a, self._udp_b, self._tcp_a, self._tcp_b):
            if sock is not None:
                sock.close()

    def __enter__(self) -> "Relay":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    @staticmethod
    def _udp(addr) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(addr)
        sock.settimeout(_RECV_TIMEOUT_S)
        return sock

    @staticmethod
    def _tcp(addr) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(addr)
        sock.listen(8)
        sock.settimeout(_RECV_TIMEOUT_S)
        return sock

    def _spawn(self, target, *args) -> None:
        thread = threading.Thread(target=target, args=args, daemon=True)
        thread.start()
        self._threads.append(thread)

    # --- UDP path -----------------------------------------------------------

    def _udp_pump(self, ingress: socket.socket, egress: socket.socket,
                  to: tuple[str, int], direction: str) -> None:
        while not self._stop.is_set():
            try:
                data, _ = ingress.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            with self._lock:
                self.captured.append((direction, data))
            if self.partitioned:
                self.counters["frames_dropped"] += 1
                continue
            outputs = [data]
            if self.on_frame is not None:
                outputs = list(self.on_frame(direction, data))
            if not outputs:
                self.counters["frames_dropped"] += 1
                continue
            for out in outputs:
                try:
                    egress.sendto(out, to)
                except OSError:
                    return
                self.counters[f"frames_{direction}"] += 1

    def send_later(self, direction: str, data: bytes, delay_s: float) -> None:
        """Deliver one frame after a delay, for reorder and delay plans."""
        egress, to = ((self._udp_a, self.b_real) if direction == "a2b"
                      else (self._udp_b, self.a_real))

        def fire():
            time.sleep(delay_s)
            if not self._stop.is_set():
                try:
                    egress.sendto(data, to)
                except OSError:
                    pass

        threading.Thread(target=fire, daemon=True).start()

    # --- TCP path -----------------------------------------------------------

    def _accept(self, listener: socket.socket, target_addr: tuple[str, int],
                fwd_direction: str) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            if self.partitioned:
                self.counters["tcp_refused"] += 1
                conn.close()
                continue
            threading.Thread(target=self._pipe, daemon=True,
                             args=(conn, target_addr, fwd_direction)).start()

    def _pipe(self, conn: socket.socket, target_addr, fwd_direction) -> None:
        rev_direction = "b2a" if fwd_direction == "a2b" else "a2b"
        try:
            upstream = socket.create_connection(target_addr, timeout=5)
        except OSError:
            conn.close()
            return
        conn.settimeout(5)
        upstream.settimeout(5)
        stop_pair = threading.Event()
        # flights from the connecting side carry odd protocol numbers
        t1 = threading.Thread(
            target=self._flight_pump,
            args=(conn, upstream, fwd_direction, 1, stop_pair), daemon=True)
        t2 = threading.Thread(
            target=self._flight_pump,
            args=(upstream, conn, rev_direction, 2, stop_pair), daemon=True)
        t1.start()
        t2.start()
        t1.join()
        t2.join()
        conn.close()
        upstream.close()

    def _flight_pump(self, src: socket.socket, dst: socket.socket,
                     direction: str, first_no: int,
                     stop_pair: threading.Event) -> None:
        number = first_no
        while not (self._stop.is_set() or stop_pair.is_set()):
            try:
                payload = _read_flight(src)
            except (OSError, ConnectionError):
                break
            if payload is None:
                break
            with self._lock:
                self.flights.append((direction, number, payload))
            self.counters["flights"] += 1
            out = payload
            if self.on_flight is not None:
                out = self.on_flight(direction, number, payload)
            if out is None:
                self.counters["flights_dropped"] += 1
                break
            try:
                dst.sendall(struct.pack(">I", len(out)) + out)
            except (OSError, ConnectionError):
                break
            number += 2
        stop_pair.set()


def _read_flight(sock: socket.socket):
    header = b""
    while len(header) < 4:
        chunk = sock.recv(4 - len(header))
        if not chunk:
            return None
        header += chunk
    (length,) = struct.unpack(">I", header)
    if length > _MAX_FLIGHT:
        raise ConnectionError("oversized flight")
    payload = b""
    while len(payload) < length:
        chunk = sock.recv(length - len(payload))
        if not chunk:
            return None
        payload += chunk
    return payload
