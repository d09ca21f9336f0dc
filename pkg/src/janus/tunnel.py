"""UDP tunnel runtime: the socket-facing shell around the key table.

Plain-side datagrams are authorized, sealed, and emitted on the network
socket; network frames are opened and the inner datagram handed to the
plain-side application. First use of a flow, a rekey signal, or a reset
notice from a restarted peer all trigger a key exchange, run over a TCP
connection to the peer's bind address. A local stream socket accepts
line-delimited JSON commands, most importantly policy rollover.

The data plane itself is stateless: packets that cannot be sealed or opened
are dropped and counted, never queued. Recovery is driven entirely by the
key exchange path.
"""
from __future__ import annotations

import json
import os
import socket
import statistics
import struct
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass, field

from . import handshake as hs
from .attestation import AttestationAuthority
from .clock import Clock, WallClock
from .dataplane import (
    DEFAULT_MTU,
    DEFAULT_REKEY_THRESHOLD,
    FlowKeyTable,
    Verdict,
)
from .epochs import (
    DEFAULT_DRAIN_POLL_MS,
    DEFAULT_GRACE_CAP_MS,
    DEFAULT_QUEUE_CAP,
    EpochCoordinator,
)
from .errors import (
    AuthFailed,
    EpochTooOld,
    HandshakeError,
    PacketReject,
    ReplayDetected,
    UnknownKey,
    ValidationError,
)
from .node import NodeIdentity, build_node
from .policy import PolicyBundle, bundle_from_json

# Unauthenticated "I do not know this key" notice sent back to the frame's
# source so a peer that outlived our restart re-keys instead of blackholing
# a one-directional flow. Forgeable by design; the only effect of a forged
# or replayed notice is a rate-limited extra handshake.
RESET_MAGIC = b"JNSR"
RESET = struct.Struct(">4sQI")  # magic, epoch, key_id

MAX_FLIGHT_LEN = 1 << 20
WARMUP_DEFAULT = 100
COST_COMPONENTS = ("lookup", "encrypt", "decrypt", "total")

_RESET_MIN_GAP_MS = 1000  # per-source notice and per-flow re-handshake floor
_MAINT_TICK_S = 0.02
_RECV_TIMEOUT_S = 0.05


def default_control_path(bind_port: int) -> str:
    return os.path.join(tempfile.gettempdir(), f"janus-{bind_port}.ctl")


class CostBook:
    """Per-packet cost percentiles with a warmup discard per direction."""

    def __init__(self, warmup: int = WARMUP_DEFAULT):
        self.warmup = warmup
        self._seen = {"seal": 0, "open": 0}
        self._lookup: list[int] = []
        self._encrypt: list[int] = []
        self._decrypt: list[int] = []
        self._total: list[int] = []
        self._lock = threading.Lock()

    def add_seal(self, cost) -> None:
        with self._lock:
            self._seen["seal"] += 1
            if self._seen["seal"] <= self.warmup:
                return
            self._lookup.append(cost.lookup_ns)
            self._encrypt.append(cost.crypto_ns)
            self._total.append(cost.total_ns)

    def add_open(self, cost) -> None:
        with self._lock:
            self._seen["open"] += 1
            if self._seen["open"] <= self.warmup:
                return
            self._lookup.append(cost.lookup_ns)
            self._decrypt.append(cost.crypto_ns)
            self._total.append(cost.total_ns)

    @staticmethod
    def _percentiles(data: list[int]) -> tuple[int, int]:
        if not data:
            return 0, 0
        if len(data) == 1:
            return data[0], data[0]
        cuts = statistics.quantiles(data, n=100)
        return int(cuts[49]), int(cuts[98])

    def rows(self) -> list[tuple[str, int, int, int]]:
        with self._lock:
            series = {
                "lookup": list(self._lookup),
                "encrypt": list(self._encrypt),
                "decrypt": list(self._decrypt),
                "total": list(self._total),
            }
        out = []
        for component in COST_COMPONENTS:
            data = series[component]
            p50, p99 = self._percentiles(data)
            out.append((component, p50, p99, len(data)))
        return out

    def csv(self) -> str:
        lines = ["component,p50_ns,p99_ns,count"]
        for component, p50, p99, count in self.rows():
            lines.append(f"{component},{p50},{p99},{count}")
        return "\n".join(lines) + "\n"


def report_packet_costs(tunnel: "Tunnel") -> str:
    return tunnel.costs.csv()


@dataclass
class TunnelConfig:
    bind: tuple[str, int]
    plain: tuple[str, int]
    identity: NodeIdentity
    authority_seed: bytes
    policy: PolicyBundle
    mtu: int = DEFAULT_MTU
    lanes: int = 4
    rekey_threshold: int = DEFAULT_REKEY_THRESHOLD
    control_path: str | None = None
    forward: tuple[str, int] | None = None  # None: learned from plain side
    warmup: int = WARMUP_DEFAULT
    clock: Clock | None = None
    handshake_deadline_ms: int = 2000
    grace_cap_ms: int = DEFAULT_GRACE_CAP_MS
    drain_poll_ms: int = DEFAULT_DRAIN_POLL_MS
    queue_cap: int = DEFAULT_QUEUE_CAP
    rng: object = None


def _send_flight(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-flight")
        buf += chunk
    return buf


def _recv_flight(sock: socket.socket) -> bytes:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > MAX_FLIGHT_LEN:
        raise ConnectionError(f"flight length {length} over limit")
    return _recv_exact(sock, length)


@dataclass
class _FlowRuntime:
    """Mutable per-destination bookkeeping outside the key table."""

    inflight: bool = False
    last_attempt_ms: int = field(default=-(1 << 30))


class Tunnel:
    """One node's running data plane plus its key-exchange services.

    Start binds four endpoints: the network UDP socket and the TCP
    handshake listener share the bind address, the plain UDP socket faces
    the application, and a unix stream socket takes control commands.
    """

    def __init__(self, config: TunnelConfig):
        self.config = config
        self.clock = config.clock or WallClock()
        self.authority = AttestationAuthority(config.authority_seed)
        self.ctx = build_node(
            config.identity,
            endpoint=config.bind,
            authority=self.authority,
            clock=self.clock,
            rng=config.rng,
        )
        self.ctx.handshake_deadline_ms = config.handshake_deadline_ms
        index = self.ctx.policy.verify_and_install(config.policy)
        self.table = FlowKeyTable(
            lanes=config.lanes,
            rekey_threshold=config.rekey_threshold,
            mtu=config.mtu,
        )
        self.table.policy = index
        self.coordinator = EpochCoordinator(
            self.table,
            self.clock,
            grace_cap_ms=config.grace_cap_ms,
            drain_poll_ms=config.drain_poll_ms,
            queue_cap=config.queue_cap,
        )
        self.coordinator.provision(index.epoch)
        self.costs = CostBook(config.warmup)
        self.counters: Counter = Counter()
        self.control_path = config.control_path or default_control_path(
            config.bind[1])

        self._flows: dict[tuple[str, int], _FlowRuntime] = {}
        self._flows_lock = threading.Lock()
        self._routes: dict[tuple[str, int], tuple[str, int]] = {}
        self._plain_peer: tuple[str, int] | None = None
        self._last_reset_ms: dict[tuple[str, int], int] = {}
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._net_sock: socket.socket | None = None
        self._plain_sock: socket.socket | None = None
        self._hs_listener: socket.socket | None = None
        self._ctl_listener: socket.socket | None = None

    # --- lifecycle ----------------------------------------------------------

    def start(self) -> "Tunnel":
        self.ctx.require_sealed()
        self._net_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._net_sock.bind(self.config.bind)
        self._net_sock.settimeout(_RECV_TIMEOUT_S)
        self._plain_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._plain_sock.bind(self.config.plain)
        self._plain_sock.settimeout(_RECV_TIMEOUT_S)
        self._hs_listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._hs_listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._hs_listener.bind(self.config.bind)
        self._hs_listener.listen(16)
        self._hs_listener.settimeout(_RECV_TIMEOUT_S)
        if os.path.exists(self.control_path):
            os.unlink(self.control_path)
        self._ctl_listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._ctl_listener.bind(self.control_path)
        self._ctl_listener.listen(4)
        self._ctl_listener.settimeout(_RECV_TIMEOUT_S)

        for lane in range(self.config.lanes):
            self._spawn(self._plain_loop, lane, name=f"plain-{lane}")
        self._spawn(self._net_loop, name="net-rx")
        self._spawn(self._accept_loop, name="hs-accept")
        self._spawn(self._control_loop, name="control")
        self._spawn(self._maintenance_loop, name="maintenance")
        return self

    def _spawn(self, target, *args, name: str) -> None:
        thread = threading.Thread(target=target, args=args, name=name,
                                  daemon=True)
        thread.start()
        self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=2)
        for sock in (self._net_sock, self._plain_sock, self._hs_listener,
                     self._ctl_listener):
            if sock is not None:
                sock.close()
        if os.path.exists(self.control_path):
            os.unlink(self.control_path)
        # zeroize every live key before the process lets go of the table
        self.table.drop_all()

    def __enter__(self) -> "Tunnel":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # --- routing ------------------------------------------------------------

    @property
    def active_epoch(self) -> int:
        return self.coordinator.active_epoch

    def _default_route(self) -> tuple[str, int] | None:
        index = self.ctx.policy.index
        dests = index.destinations_for(self.ctx.measurement)
        if not dests:
            return None
        return (dests[0].ip, dests[0].port)

    def _route_for(self, plain_src: tuple[str, int]) -> tuple[str, int] | None:
        route = self._routes.get(plain_src)
        if route is not None:
            return route
        route = self._default_route()
        if route is not None:
            self._routes[plain_src] = route
        return route

    # --- outbound: plain -> sealed ------------------------------------------

    def _plain_loop(self, lane: int) -> None:
        sock = self._plain_sock
        tracker = self.coordinator.tracker
        while not self._stop.is_set():
            try:
                inner, src = sock.recvfrom(65535)
            except socket.timeout:
                tracker.park(lane)
                continue
            except OSError:
                return
            tracker.observe(lane)
            self._plain_peer = src
            self.counters["plain_in"] += 1
            route = self._route_for(src)
            if route is None:
                self.counters["deny_no_route"] += 1
                continue
            self._seal_and_send(inner, route, lane)

    def _seal_and_send(self, inner: bytes, route: tuple[str, int],
                       lane: int) -> None:
        try:
            result = self.table.seal(route[0], route[1], inner, lane,
                                     epoch=self.active_epoch,
                                     record_cost=True)
        except ValidationError:
            self.counters["oversize_drop"] += 1
            return
        if result.verdict is Verdict.DENY:
            self.counters["deny"] += 1
            return
        if result.verdict is Verdict.KEY_PENDING:
            # stateless: the packet is dropped, the key exchange races ahead
            self.counters["key_pending_drop"] += 1
            self._request_handshake(route)
            return
        self._net_sock.sendto(result.frame, route)
        self.counters["sealed_out"] += 1
        if result.cost is not None:
            self.costs.add_seal(result.cost)
        if result.rekey_required:
            self.counters["rekey_signals"] += 1
            self._request_handshake(route, force=True)

    # --- inbound: sealed -> plain -------------------------------------------

    def _net_loop(self) -> None:
        sock = self._net_sock
        while not self._stop.is_set():
            try:
                frame, src = sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            if frame[:4] == RESET_MAGIC:
                self._handle_reset(frame, src)
                continue
            self.counters["net_in"] += 1
            try:
                inner, entry, cost = self.table.open(frame, src,
                                                     record_cost=True)
            except UnknownKey:
                self.counters["unknown_key"] += 1
                self._send_reset(frame, src)
                continue
            except EpochTooOld:
                self.counters["epoch_too_old"] += 1
                continue
            except ReplayDetected:
                self.counters["replay"] += 1
                continue
            except AuthFailed:
                self.counters["auth_failed"] += 1
                continue
            except PacketReject:
                self.counters["rejected"] += 1
                continue
            self.costs.add_open(cost)
            if entry.epoch != self.active_epoch:
                self.coordinator.note_grace_frame(entry.epoch)
                self.counters["grace_frames"] += 1
            self._deliver(inner, entry, src)

    def _deliver(self, inner: bytes, entry, src: tuple[str, int]) -> None:
        target = self.config.forward or self._plain_peer
        if target is None:
            self.counters["no_plain_peer_drop"] += 1
            return
        # replies from this application endpoint route back to the sender
        self._routes[target] = entry.peer or src
        try:
            self._plain_sock.sendto(inner, target)
        except OSError:
            self.counters["plain_send_error"] += 1
            return
        self.counters["delivered"] += 1

    # --- reset notices ------------------------------------------------------

    def _send_reset(self, frame: bytes, src: tuple[str, int]) -> None:
        if len(frame) < 24 or frame[:4] != b"JNS1":
            return
        now = self.clock.now_ms()
        if now - self._last_reset_ms.get(src, -(1 << 30)) < _RESET_MIN_GAP_MS:
            return
        self._last_reset_ms[src] = now
        _, epoch, key_id, _, _, _ = struct.unpack(">4sQIHIH", frame[:24])
        try:
            self._net_sock.sendto(RESET.pack(RESET_MAGIC, epoch, key_id), src)
            self.counters["resets_sent"] += 1
        except OSError:
            pass

    def _handle_reset(self, raw: bytes, src: tuple[str, int]) -> None:
        if len(raw) != RESET.size:
            return
        _, epoch, key_id = RESET.unpack(raw)
        entry = self.table.entry_by_key(epoch, key_id)
        if entry is None or entry.peer != src:
            return  # stale or forged notice for a key we do not hold
        self.counters["resets_received"] += 1
        self._request_handshake(src)

    # --- key exchange, initiator side ---------------------------------------

    def _request_handshake(self, dest: tuple[str, int],
                           force: bool = False) -> None:
        now = self.clock.now_ms()
        with self._flows_lock:
            flow = self._flows.setdefault(dest, _FlowRuntime())
            if flow.inflight:
                return
            if not force and now - flow.last_attempt_ms < _RESET_MIN_GAP_MS:
                return
            flow.inflight = True
            flow.last_attempt_ms = now
        threading.Thread(target=self._run_initiator, args=(dest,),
                         name=f"hs-init-{dest[1]}", daemon=True).start()

    def _run_initiator(self, dest: tuple[str, int]) -> None:
        self.counters["handshakes_initiated"] += 1
        try:
            with socket.create_connection(
                    dest, timeout=self.config.handshake_deadline_ms / 1000
            ) as conn:
                state, flight1 = hs.initiate(self.ctx, *dest)
                _send_flight(conn, flight1)
                flight2 = _recv_flight(conn)
                material, flight3 = hs.finalize_initiator(state, self.ctx,
                                                          flight2)
                _send_flight(conn, flight3)
            self.table.install(material)
            self.counters["handshakes_completed"] += 1
        except (HandshakeError, ValidationError) as exc:
            self.counters["handshakes_failed"] += 1
            self.counters[f"hs_fail_{type(exc).__name__}"] += 1
        except (OSError, ConnectionError):
            self.counters["handshakes_failed"] += 1
            self.counters["hs_fail_transport"] += 1
        finally:
            with self._flows_lock:
                self._flows[dest].inflight = False

    # --- key exchange, responder side ---------------------------------------

    def _accept_loop(self) -> None:
        listener = self._hs_listener
        while not self._stop.is_set():
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._serve_handshake, args=(conn,),
                             name="hs-serve", daemon=True).start()

    def _serve_handshake(self, conn: socket.socket) -> None:
        conn.settimeout(self.config.handshake_deadline_ms / 1000)
        with conn:
            try:
                flight1 = _recv_flight(conn)
            except (OSError, ConnectionError):
                return
            try:
                state, flight2 = hs.respond(self.ctx, flight1)
            except Exception as exc:  # every verdict maps to one abort frame
                self._abort(conn, exc)
                return
            try:
                _send_flight(conn, flight2)
                flight3 = _recv_flight(conn)
            except (OSError, ConnectionError):
                state.destroy()
                return
            try:
                material = hs.finalize_responder(state, self.ctx, flight3)
            except Exception as exc:
                self._abort(conn, exc)
                return
        try:
            self.table.install(material)
        except HandshakeError:
            self.counters["install_refused"] += 1
            return
        self.counters["handshakes_served"] += 1

    def _abort(self, conn: socket.socket, exc: Exception) -> None:
        self.counters["handshakes_rejected"] += 1
        self.counters[f"hs_reject_{type(exc).__name__}"] += 1
        try:
            _send_flight(conn, hs.abort_bytes_for(self.ctx, exc))
        except (OSError, ConnectionError):
            pass

    # --- control socket -----------------------------------------------------

    def _control_loop(self) -> None:
        listener = self._ctl_listener
        while not self._stop.is_set():
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._serve_control, args=(conn,),
                             name="control-conn", daemon=True).start()

    def _serve_control(self, conn: socket.socket) -> None:
        with conn, conn.makefile("r", encoding="utf-8") as reader:
            for line in reader:
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                    reply = self._dispatch(doc)
                except (json.JSONDecodeError, TypeError) as exc:
                    reply = {"ok": False, "error": f"bad command: {exc}"}
                try:
                    conn.sendall(json.dumps(reply).encode() + b"\n")
                except OSError:
                    return

    def _dispatch(self, doc: dict) -> dict:
        cmd = doc.get("cmd")
        if cmd == "roll":
            return self._cmd_roll(doc)
        if cmd == "stats":
            return {"ok": True, "stats": self.stats()}
        if cmd == "costs":
            return {"ok": True, "csv": self.costs.csv()}
        if cmd == "ping":
            return {"ok": True, "active_epoch": self.active_epoch}
        if cmd == "stop":
            threading.Thread(target=self.stop, daemon=True).start()
            return {"ok": True}
        return {"ok": False, "error": f"unknown command {cmd!r}"}

    def _cmd_roll(self, doc: dict) -> dict:
        path = doc.get("policy_path")
        if not isinstance(path, str):
            return {"ok": False, "error": "roll requires policy_path"}
        try:
            with open(path, encoding="utf-8") as fh:
                bundle = bundle_from_json(fh.read())
            index = self.ctx.policy.verify_and_install(bundle)
        except (OSError, ValidationError) as exc:
            return {"ok": False, "error": str(exc)}
        except Exception as exc:  # signature, downgrade
            return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
        self.table.policy = index
        self.coordinator.begin_rollover(index.epoch)
        self.counters["rollovers"] += 1
        return {"ok": True, "active_epoch": index.epoch}

    # --- maintenance --------------------------------------------------------

    def _maintenance_loop(self) -> None:
        while not self._stop.wait(_MAINT_TICK_S):
            self.coordinator.poll()
            self.ctx.current_collateral()

    # --- introspection ------------------------------------------------------

    def stats(self) -> dict:
        out = dict(self.counters)
        out["active_epoch"] = self.active_epoch
        out["live_epochs"] = self.coordinator.live_epochs
        out["forced_resets"] = self.coordinator.forced_resets
        out["deferred_peak"] = self.coordinator.deferred_peak
        out["sessions"] = self.table.session_count
        return out


# --- control-socket client helpers ------------------------------------------

def control_request(control_path: str, doc: dict, *,
                    timeout: float = 5.0) -> dict:
    """Send one command to a running tunnel and return its reply."""
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as sock:
        sock.settimeout(timeout)
        sock.connect(control_path)
        sock.sendall(json.dumps(doc).encode() + b"\n")
        with sock.makefile("r", encoding="utf-8") as reader:
            line = reader.readline()
    if not line:
        raise ConnectionError("no reply from control socket")
    return json.loads(line)


def roll_policy(control_path: str, policy_path: str) -> dict:
    return control_request(control_path,
                           {"cmd": "roll", "policy_path": policy_path})
