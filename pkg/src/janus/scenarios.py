"""Adversarial scenario runner.

Each scenario spins up real tunnel processes on loopback, optionally with
the interposing relay between them, drives traffic from this process, and
records named assertions into a schema-validated JSON report. Outcomes are
deterministic for a fixed seed; wall-clock durations are not.
"""
from __future__ import annotations

import json
import os
import random
import secrets
import shutil
import socket
import struct
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from . import handshake as hs
from .attestation import AttestationAuthority
from .clock import WallClock
from .errors import PeerRejected, ValidationError
from .node import NodeIdentity, build_node, measurement_of
from .policy import (
    SAME_BUNDLE,
    FlowRule,
    PeerEntry,
    PolicyBundle,
    bundle_to_json,
    sign_bundle,
)
from .relay import Relay, free_loopback_port
from .tunnel import control_request
from . import wire

NAMES = (
    "mitm",
    "replay",
    "epoch-downgrade",
    "unauthorized-binary",
    "digest-mismatch",
    "stalled-lane",
    "partition",
)

REPORT_SCHEMA = {
    "type": "object",
    "required": ["scenario", "seed", "passed", "assertions", "duration_s"],
    "properties": {
        "scenario": {"type": "string", "enum": list(NAMES)},
        "seed": {"type": "integer"},
        "passed": {"type": "boolean"},
        "duration_s": {"type": "number", "minimum": 0},
        "assertions": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "ok"],
                "properties": {
                    "name": {"type": "string"},
                    "ok": {"type": "boolean"},
                    "detail": {"type": "string"},
                },
            },
        },
        "stats": {"type": "object"},
    },
}

_AUTHORITY_SEED = bytes.fromhex(
    "a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3a3")
_OWNER_SEED = bytes.fromhex(
    "b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4b4")
_PROXY_INPUT = b"scenario enforcement proxy"


def _owner_key():
    from cryptography.hazmat.primitives.asymmetric import ed25519

    return ed25519.Ed25519PrivateKey.from_private_bytes(_OWNER_SEED)


def _mesh_bundle(epoch: int, endpoints: dict[bytes, tuple[str, int]]) -> PolicyBundle:
    """Signed full-mesh bundle with one rule per destination endpoint."""
    key = _owner_key()
    rules = []
    taken = set()
    measurements = list(endpoints)
    for dst_mu, addr in endpoints.items():
        if addr in taken:
            raise ValidationError(f"duplicate endpoint {addr}")
        taken.add(addr)
        src_mu = next(m for m in measurements if m != dst_mu)
        rules.append(FlowRule(src_mu, PeerEntry(addr[0], addr[1], dst_mu,
                                                SAME_BUNDLE)))
    bundle = PolicyBundle(epoch=epoch, rules=tuple(rules),
                          owner_public_key=key.public_key().public_bytes_raw())
    return sign_bundle(bundle, key)


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


class Harness:
    """Temp files, child processes, sockets, and the assertion ledger."""

    def __init__(self, scenario: str, seed: int):
        self.scenario = scenario
        self.seed = seed
        self.dir = Path(tempfile.mkdtemp(prefix=f"janus-{scenario}-"))
        self.checks: list[Check] = []
        self.children: list["ChildTunnel"] = []
        self.relays: list[Relay] = []
        self.socks: list[socket.socket] = []
        self.extra_stats: dict = {}

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        self.checks.append(Check(name, bool(ok), detail))
        return bool(ok)

    def write(self, name: str, text: str) -> str:
        path = self.dir / name
        path.write_text(text)
        return str(path)

    def identity_file(self, name: str, mu_input: bytes) -> str:
        identity = NodeIdentity(measurement=measurement_of(mu_input),
                                proxy_digest=measurement_of(_PROXY_INPUT))
        doc = json.loads(identity.to_json())
        doc["authority_seed"] = _AUTHORITY_SEED.hex()
        return self.write(f"{name}.identity.json", json.dumps(doc, indent=2))

    def policy_file(self, name: str, bundle: PolicyBundle) -> str:
        return self.write(f"{name}.policy.json", bundle_to_json(bundle))

    def udp(self) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(("127.0.0.1", 0))
        sock.settimeout(0.2)
        self.socks.append(sock)
        return sock

    def spawn(self, name: str, **kw) -> "ChildTunnel":
        child = ChildTunnel(name, self, **kw)
        self.children.append(child)
        return child

    def relay(self, **kw) -> Relay:
        relay = Relay(("0.0.0.0", 1), ("0.0.0.0", 1), **kw)
        self.relays.append(relay)
        return relay

    def cleanup(self) -> None:
        for child in self.children:
            child.stop()
        for relay in self.relays:
            try:
                relay.stop()
            except Exception:
                pass
        for sock in self.socks:
            sock.close()
        shutil.rmtree(self.dir, ignore_errors=True)

    def report(self, duration_s: float) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "passed": all(c.ok for c in self.checks),
            "duration_s": round(duration_s, 3),
            "assertions": [
                {"name": c.name, "ok": c.ok, "detail": c.detail}
                for c in self.checks
            ],
            "stats": self.extra_stats,
        }


class ChildTunnel:
    """One `tunnel run` child process plus its control socket."""

    READY_TIMEOUT_S = 20

    def __init__(self, name: str, harness: Harness, *,
                 policy_path: str, identity_path: str,
                 bind: tuple[str, int] | None = None,
                 forward: tuple[str, int] | None = None,
                 lanes: int = 2, seed: int = 0):
        self.name = name
        self.bind = bind or ("127.0.0.1", free_loopback_port())
        self.plain = ("127.0.0.1", free_loopback_port())
        self.control = str(harness.dir / f"{name}.ctl")
        argv = [
            sys.executable, "-m", "janus", "tunnel", "run",
            "--bind", f"{self.bind[0]}:{self.bind[1]}",
            "--plain", f"{self.plain[0]}:{self.plain[1]}",
            "--policy", policy_path,
            "--identity", identity_path,
            "--control", self.control,
            "--lanes", str(lanes),
            "--warmup", "0",
        ]
        if forward is not None:
            argv += ["--forward", f"{forward[0]}:{forward[1]}"]
        env = dict(os.environ)
        env["JANUS_SEED"] = str(seed)
        src_root = str(Path(__file__).resolve().parent.parent)
        env["PYTHONPATH"] = src_root + os.pathsep + env.get("PYTHONPATH", "")
        self.proc = subprocess.Popen(argv, env=env, stdout=subprocess.PIPE,
                                     stderr=subprocess.PIPE, text=True)
        self._lines: list[str] = []
        self._reader = threading.Thread(target=self._pump_stdout, daemon=True)
        self._reader.start()
        self._wait_ready()

    def _pump_stdout(self) -> None:
        for line in self.proc.stdout:
            self._lines.append(line.strip())

    def _wait_ready(self) -> None:
        deadline = time.time() + self.READY_TIMEOUT_S
        while time.time() < deadline:
            for line in self._lines:
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if doc.get("ready"):
                    return
            if self.proc.poll() is not None:
                raise RuntimeError(
                    f"{self.name} exited early: {self.proc.stderr.read()}")
            time.sleep(0.02)
        raise RuntimeError(f"{self.name} did not report ready")

    def stats(self) -> dict:
        reply = control_request(self.control, {"cmd": "stats"})
        return reply["stats"]

    def request(self, doc: dict) -> dict:
        return control_request(self.control, doc)

    def alive(self) -> bool:
        return self.proc.poll() is None

    def stop(self) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait(timeout=5)


# --- traffic helpers ---------------------------------------------------------


def _pump(app: socket.socket, plain: tuple[str, int], n: int, *,
          tag: bytes, budget: float = 10.0) -> tuple[int, int]:
    """Round trips through a tunnel's plain side with retransmit; returns
    (distinct deliveries, duplicate deliveries)."""
    got: set[int] = set()
    dups = 0
    deadline = time.time() + budget
    while len(got) < n and time.time() < deadline:
        for i in range(n):
            if i not in got:
                app.sendto(tag + b"%06d" % i, plain)
        try:
            while True:
                data, _ = app.recvfrom(65535)
                if data.startswith(tag):
                    idx = int(data[len(tag):len(tag) + 6])
                    if idx in got:
                        dups += 1
                    got.add(idx)
        except socket.timeout:
            pass
    return len(got), dups


def _one_way_burst(app: socket.socket, plain: tuple[str, int], n: int, *,
                   tag: bytes, pace_s: float = 0.0005) -> None:
    for i in range(n):
        app.sendto(tag + b"%06d" % i, plain)
        time.sleep(pace_s)


class _EchoApp:
    def __init__(self, harness: Harness):
        self.sock = harness.udp()
        self.addr = self.sock.getsockname()
        self.thread = threading.Thread(target=self._loop, daemon=True)
        self.thread.start()

    def _loop(self):
        while True:
            try:
                data, src = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                self.sock.sendto(data, src)
            except OSError:
                return


def _read_exact(conn: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = conn.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-flight")
        buf += chunk
    return buf


# --- scenarios ---------------------------------------------------------------


def _pair_through_relay(h: Harness, seed: int, *, on_flight=None,
                        on_frame=None):
    """A and B children whose policies pin each other at the relay's faces,
    so every packet crosses the interposer."""
    relay = h.relay(on_flight=on_flight, on_frame=on_frame)
    bundle = _mesh_bundle(1, {
        measurement_of(b"node A"): relay.face_a,
        measurement_of(b"node B"): relay.face_b,
    })
    policy = h.policy_file("mesh", bundle)
    echo = _EchoApp(h)
    a = h.spawn("a", policy_path=policy,
                identity_path=h.identity_file("a", b"node A"), seed=seed)
    b = h.spawn("b", policy_path=policy,
                identity_path=h.identity_file("b", b"node B"),
                forward=echo.addr, seed=seed + 1)
    relay.a_real = a.bind
    relay.b_real = b.bind
    relay.start()
    return relay, a, b


def _scn_mitm(h: Harness, seed: int) -> None:
    # a key-substitution adversary: swap the responder's ECDH share for one
    # the relay controls, leaving the quote untouched
    from cryptography.hazmat.primitives.asymmetric import ec
    from cryptography.hazmat.primitives.serialization import (
        Encoding, PublicFormat)

    own_share = ec.generate_private_key(ec.SECP384R1()).public_key()
    fake_pk = own_share.public_bytes(Encoding.X962,
                                     PublicFormat.UncompressedPoint)

    def tamper(direction, number, data):
        flight = wire.decode_flight(data)
        if wire.TAG_PUBKEY not in flight.fields or flight.is_abort:
            return data
        swapped = [(tag, fake_pk if tag == wire.TAG_PUBKEY else value)
                   for tag, value in flight.fields.items()]
        return wire.encode_flight(flight.flight_no, flight.epoch, swapped)

    relay, a, b = _pair_through_relay(h, seed, on_flight=tamper)
    app = h.udp()
    deadline = time.time() + 6
    while time.time() < deadline:
        app.sendto(b"probe", a.plain)
        stats = a.stats()
        if stats.get("hs_fail_BindingMismatch", 0) >= 1:
            break
        time.sleep(0.1)
    sa, sb = a.stats(), b.stats()
    h.check("initiator detects key substitution",
            sa.get("hs_fail_BindingMismatch", 0) >= 1,
            f"hs_fail_BindingMismatch={sa.get('hs_fail_BindingMismatch', 0)}")
    h.check("responder refuses the swapped share",
            sb.get("hs_reject_BindingMismatch", 0) >= 1,
            f"hs_reject_BindingMismatch={sb.get('hs_reject_BindingMismatch', 0)}")
    h.check("no session on initiator", sa["sessions"] == 0)
    h.check("no session on responder", sb["sessions"] == 0)
    h.check("nothing delivered", sb.get("delivered", 0) == 0)
    h.check("relay saw the exchange",
            relay.counters["flights"] >= 2,
            f"flights={relay.counters['flights']}")
    h.extra_stats = {"a": sa, "b": sb, "relay": relay.counters}


def _scn_replay(h: Harness, seed: int) -> None:
    def duplicate(direction, data):
        return [data, data]

    relay, a, b = _pair_through_relay(h, seed, on_frame=duplicate)
    app = h.udp()
    delivered, dups = _pump(app, a.plain, 40, tag=b"rp")
    sa, sb = a.stats(), b.stats()
    h.check("all payloads delivered once", delivered == 40 and dups == 0,
            f"delivered={delivered} dups={dups}")
    h.check("responder replay window fired", sb.get("replay", 0) >= 1,
            f"replay={sb.get('replay', 0)}")
    h.check("initiator replay window fired", sa.get("replay", 0) >= 1,
            f"replay={sa.get('replay', 0)}")
    h.extra_stats = {"a": sa, "b": sb, "relay": relay.counters}


def _scn_epoch_downgrade(h: Harness, seed: int) -> None:
    bind_a = ("127.0.0.1", free_loopback_port())
    bind_b = ("127.0.0.1", free_loopback_port())
    endpoints = {measurement_of(b"node A"): bind_a,
                 measurement_of(b"node B"): bind_b}
    policy5 = h.policy_file("e5", _mesh_bundle(5, endpoints))
    policy3 = h.policy_file("e3", _mesh_bundle(3, endpoints))
    policy6 = h.policy_file("e6", _mesh_bundle(6, endpoints))
    unsigned = _mesh_bundle(7, endpoints)
    doc = json.loads(bundle_to_json(unsigned))
    doc["signature"] = "00" * 64
    forged = h.write("forged.policy.json", json.dumps(doc))
    echo = _EchoApp(h)
    a = h.spawn("a", policy_path=policy5,
                identity_path=h.identity_file("a", b"node A"),
                bind=bind_a, seed=seed)
    b = h.spawn("b", policy_path=policy5,
                identity_path=h.identity_file("b", b"node B"),
                bind=bind_b, forward=echo.addr, seed=seed + 1)
    app = h.udp()
    delivered, _ = _pump(app, a.plain, 10, tag=b"pre")
    h.check("baseline traffic flows", delivered == 10)

    reply = a.request({"cmd": "roll", "policy_path": policy3})
    h.check("downgrade rejected", reply.get("ok") is False,
            json.dumps(reply))
    reply_forged = a.request({"cmd": "roll", "policy_path": forged})
    h.check("forged signature rejected", reply_forged.get("ok") is False,
            json.dumps(reply_forged))
    ping = a.request({"cmd": "ping"})
    h.check("active epoch unchanged", ping.get("active_epoch") == 5)
    delivered, _ = _pump(app, a.plain, 10, tag=b"mid")
    h.check("session survives rejected rolls", delivered == 10)

    ok_a = a.request({"cmd": "roll", "policy_path": policy6})
    ok_b = b.request({"cmd": "roll", "policy_path": policy6})
    h.check("legitimate upgrade accepted",
            ok_a.get("active_epoch") == 6 and ok_b.get("active_epoch") == 6)
    delivered, _ = _pump(app, a.plain, 10, tag=b"post")
    h.check("traffic resumes on the new epoch", delivered == 10)
    h.extra_stats = {"a": a.stats(), "b": b.stats()}


def _scn_unauthorized_binary(h: Harness, seed: int) -> None:
    bind_b = ("127.0.0.1", free_loopback_port())
    listed = {measurement_of(b"node A"): ("127.0.0.1", free_loopback_port()),
              measurement_of(b"node B"): bind_b}
    policy = h.policy_file("mesh", _mesh_bundle(1, listed))
    b = h.spawn("b", policy_path=policy,
                identity_path=h.identity_file("b", b"node B"),
                bind=bind_b, seed=seed)

    # the intruder runs its own node with a permissive policy of its own
    mu_c = measurement_of(b"unauthorized binary")
    authority = AttestationAuthority(_AUTHORITY_SEED)
    node_c = build_node(
        NodeIdentity(mu_c, measurement_of(_PROXY_INPUT)),
        endpoint=("127.0.0.1", free_loopback_port()),
        authority=authority, clock=WallClock(),
        rng=random.Random(seed + 77))
    own = _mesh_bundle(1, {mu_c: ("127.0.0.1", free_loopback_port()),
                           measurement_of(b"node B"): bind_b})
    node_c.policy.verify_and_install(own)

    rejected = 0
    key_material_destroyed = True
    attempts = 3
    for _ in range(attempts):
        state, flight1 = hs.initiate(node_c, *bind_b)
        try:
            with socket.create_connection(bind_b, timeout=5) as conn:
                conn.sendall(struct.pack(">I", len(flight1)) + flight1)
                size = struct.unpack(">I", _read_exact(conn, 4))[0]
                reply = _read_exact(conn, size)
            hs.finalize_initiator(state, node_c, reply)
        except PeerRejected:
            rejected += 1
            if any(state.ephemeral.scalar_view):
                key_material_destroyed = False
    sb = b.stats()
    h.check("every attempt rejected", rejected == attempts,
            f"{rejected}/{attempts}")
    h.check("responder names the measurement mismatch",
            sb.get("hs_reject_MeasurementMismatch", 0) >= attempts,
            json.dumps({k: v for k, v in sb.items() if "reject" in k}))
    h.check("no session key material on responder", sb["sessions"] == 0)
    h.check("intruder ephemeral key destroyed", key_material_destroyed)
    h.extra_stats = {"b": sb, "attempts": attempts}


def _scn_digest_mismatch(h: Harness, seed: int) -> None:
    bind_a = ("127.0.0.1", free_loopback_port())
    bind_b = ("127.0.0.1", free_loopback_port())
    mu_a, mu_b = measurement_of(b"node A"), measurement_of(b"node B")
    shared = {mu_a: bind_a, mu_b: bind_b}
    policy_a = h.policy_file("a", _mesh_bundle(1, shared))
    drifted = dict(shared)
    drifted[measurement_of(b"node C")] = ("127.0.0.1", free_loopback_port())
    policy_b = h.policy_file("b", _mesh_bundle(1, drifted))
    echo = _EchoApp(h)
    a = h.spawn("a", policy_path=policy_a,
                identity_path=h.identity_file("a", b"node A"),
                bind=bind_a, seed=seed)
    b = h.spawn("b", policy_path=policy_b,
                identity_path=h.identity_file("b", b"node B"),
                bind=bind_b, forward=echo.addr, seed=seed + 1)
    app = h.udp()
    deadline = time.time() + 6
    while time.time() < deadline:
        app.sendto(b"probe", a.plain)
        if b.stats().get("hs_reject_BindingMismatch", 0) >= 1:
            break
        time.sleep(0.1)
    sa, sb = a.stats(), b.stats()
    h.check("responder refuses the drifted enforcement state",
            sb.get("hs_reject_BindingMismatch", 0) >= 1,
            json.dumps({k: v for k, v in sb.items() if "reject" in k}))
    h.check("initiator learns of the refusal",
            sa.get("hs_fail_BindingMismatch", 0) >= 1)
    h.check("no sessions formed",
            sa["sessions"] == 0 and sb["sessions"] == 0)
    h.check("nothing delivered", sb.get("delivered", 0) == 0)
    h.extra_stats = {"a": sa, "b": sb}


def _scn_stalled_lane(h: Harness, seed: int) -> None:
    from .tunnel import Tunnel, TunnelConfig

    bind_a = ("127.0.0.1", free_loopback_port())
    bind_b = ("127.0.0.1", free_loopback_port())
    endpoints = {measurement_of(b"node A"): bind_a,
                 measurement_of(b"node B"): bind_b}
    bundle1 = _mesh_bundle(1, endpoints)
    policy1 = h.policy_file("e1", bundle1)
    policy2 = h.policy_file("e2", _mesh_bundle(2, endpoints))
    echo = _EchoApp(h)
    b = h.spawn("b", policy_path=policy1,
                identity_path=h.identity_file("b", b"node B"),
                bind=bind_b, forward=echo.addr, seed=seed + 1)
    # node A runs in-process so retired sessions can be injected directly;
    # a held grace deadline makes the queue bound the only release path
    a = Tunnel(TunnelConfig(
        bind=bind_a, plain=("127.0.0.1", free_loopback_port()),
        identity=NodeIdentity(measurement_of(b"node A"),
                              measurement_of(_PROXY_INPUT)),
        authority_seed=_AUTHORITY_SEED, policy=bundle1,
        lanes=2, warmup=0, grace_cap_ms=60_000,
        rng=random.Random(seed))).start()
    try:
        app = h.udp()
        delivered, _ = _pump(app, a.config.plain, 10, tag=b"pre")
        h.check("baseline traffic flows", delivered == 10)

        # 1,023 retired-to-be sessions besides the real one: the rollover
        # will defer exactly 1,024 entries and hit the bound
        synthetic = _synthetic_sessions(1023, epoch=1)
        for material in synthetic:
            a.table.install(material)
        retired = a.table.entries_for_epoch(1)
        h.check("queue primed to capacity", len(retired) == 1024,
                f"epoch-1 entries={len(retired)}")

        reply = a._dispatch({"cmd": "roll", "policy_path": policy2})
        h.check("rollover accepted", reply.get("active_epoch") == 2)
        b.request({"cmd": "roll", "policy_path": policy2})

        h.check("forced reset triggered exactly once",
                a.coordinator.forced_resets == 1,
                f"forced_resets={a.coordinator.forced_resets}")
        h.check("deferred queue peaked at the bound",
                a.coordinator.deferred_peak == 1024,
                f"peak={a.coordinator.deferred_peak}")
        reasons = [e.get("reason") for e in a.coordinator.events
                   if e["event"] == "flush"]
        h.check("flush came from the capacity bound",
                "deferred queue at capacity" in reasons, str(reasons))
        h.check("stale keys zeroized",
                all(entry.key_view == b"\x00" * 32 for entry in retired))

        sent = 300
        delivered, _ = _pump(app, a.config.plain, sent, tag=b"post",
                             budget=20.0)
        h.check("active-epoch flow continues (>= 99%)",
                delivered >= sent * 0.99, f"{delivered}/{sent}")
        h.check("no process abort", b.alive() and not a._stop.is_set())
        h.extra_stats = {"a": a.stats(), "b": b.stats()}
    finally:
        a.stop()


def _synthetic_sessions(count: int, *, epoch: int):
    """Distinct retired-session stand-ins with real key buffers."""
    out = []
    for i in range(count):
        out.append(hs.SessionMaterial(
            data_key=bytearray(secrets.token_bytes(32)),
            confirm_key=bytearray(secrets.token_bytes(32)),
            key_id=0x7000_0000 + i,
            initiator_prefix=secrets.token_bytes(6),
            responder_prefix=secrets.token_bytes(6),
            src_measurement=b"\x0a" * 48,
            dst_measurement=b"\x0b" * 48,
            policy_digest=b"\x0c" * 48,
            epoch=epoch,
            established_ms=0,
            role="initiator",
            peer=None,
        ))
    return out


def _scn_partition(h: Harness, seed: int) -> None:
    relay, a, b = _pair_through_relay(h, seed)
    app = h.udp()
    delivered, _ = _pump(app, a.plain, 10, tag=b"pre")
    h.check("baseline traffic flows", delivered == 10)
    base_handshakes = a.stats().get("handshakes_completed", 0)

    relay.partitioned = True
    during, _ = _pump(app, a.plain, 5, tag=b"cut", budget=1.2)
    h.check("partition blackholes the path", during == 0,
            f"delivered={during}")
    h.check("relay dropped frames", relay.counters["frames_dropped"] >= 1)
    relay.partitioned = False

    delivered, _ = _pump(app, a.plain, 10, tag=b"heal")
    h.check("traffic resumes after healing", delivered == 10)
    sa = a.stats()
    h.check("same session resumed, no rekey",
            sa.get("handshakes_completed", 0) == base_handshakes
            and sa["sessions"] == 1,
            f"handshakes={sa.get('handshakes_completed', 0)}")
    h.extra_stats = {"a": sa, "b": b.stats(), "relay": relay.counters}


_RUNNERS = {
    "mitm": _scn_mitm,
    "replay": _scn_replay,
    "epoch-downgrade": _scn_epoch_downgrade,
    "unauthorized-binary": _scn_unauthorized_binary,
    "digest-mismatch": _scn_digest_mismatch,
    "stalled-lane": _scn_stalled_lane,
    "partition": _scn_partition,
}


def run(name: str, *, seed: int = 0) -> dict:
    """Execute one scenario; returns the schema-valid report dict."""
    if name not in _RUNNERS:
        raise ValidationError(
            f"unknown scenario {name!r}; choose from {sorted(NAMES)}")
    harness = Harness(name, seed)
    started = time.time()
    try:
        _RUNNERS[name](harness, seed)
    finally:
        harness.cleanup()
    report = harness.report(time.time() - started)
    jsonschema.validate(report, REPORT_SCHEMA)
    return report
