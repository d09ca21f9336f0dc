"""Loopback harness pieces shared by the tunnel, scenario, and acceptance
tests: port allocation, echo applications, and a two-tunnel rig."""
from __future__ import annotations

import os
import random
import socket
import tempfile
import threading
import time

from conftest import AUTHORITY_SEED, PROXY_DIGEST, make_bundle
from janus.node import NodeIdentity, measurement_of
from janus.policy import PolicyBundle, bundle_to_json
from janus.tunnel import Tunnel, TunnelConfig, control_request

LOOP = "127.0.0.1"


def free_port() -> int:
    """A port currently free for both TCP and UDP on loopback."""
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
    raise RuntimeError("no free loopback port found")


class EchoApp:
    """UDP echoer standing in for the protected application."""

    def __init__(self, transform=None):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((LOOP, 0))
        self.addr = self.sock.getsockname()
        self.received = 0
        self._transform = transform or (lambda d: d)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self):
        self.sock.settimeout(0.1)
        while not self._stop.is_set():
            try:
                data, src = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            self.received += 1
            reply = self._transform(data)
            if reply is not None:
                try:
                    self.sock.sendto(reply, src)
                except OSError:
                    return

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=1)
        self.sock.close()


class TunnelRig:
    """Two tunnels A and B on loopback, B fronting an echo application.

    Policies are full-mesh signed bundles over both measurements. Endpoint
    overrides let a test interpose a relay: the bundle then points each
    node at the relay face impersonating its peer.
    """

    MU_A = measurement_of(b"node A binary")
    MU_B = measurement_of(b"node B binary")

    def __init__(self, *, epoch: int = 1, seed: int = 7, lanes: int = 2,
                 rekey_threshold: int | None = None, warmup: int = 100,
                 face_a: tuple[str, int] | None = None,
                 face_b: tuple[str, int] | None = None,
                 grace_cap_ms: int = 500, policy_for_a: PolicyBundle | None = None):
        self.bind_a = (LOOP, free_port())
        self.bind_b = (LOOP, free_port())
        self.plain_a = (LOOP, free_port())
        self.plain_b = (LOOP, free_port())
        # where each bundle claims the peers live; defaults to the truth
        self.face_a = face_a or self.bind_a
        self.face_b = face_b or self.bind_b
        self.echo = EchoApp()
        self._tmp_files: list[str] = []
        kw = {}
        if rekey_threshold is not None:
            kw["rekey_threshold"] = rekey_threshold
        bundle = self.bundle(epoch)
        self.tunnel_a = Tunnel(TunnelConfig(
            bind=self.bind_a, plain=self.plain_a,
            identity=NodeIdentity(self.MU_A, PROXY_DIGEST),
            authority_seed=AUTHORITY_SEED,
            policy=policy_for_a or bundle,
            lanes=lanes, warmup=warmup, grace_cap_ms=grace_cap_ms,
            rng=random.Random(seed), **kw))
        self.tunnel_b = Tunnel(TunnelConfig(
            bind=self.bind_b, plain=self.plain_b,
            identity=NodeIdentity(self.MU_B, PROXY_DIGEST),
            authority_seed=AUTHORITY_SEED, policy=bundle,
            forward=self.echo.addr,
            lanes=lanes, warmup=warmup, grace_cap_ms=grace_cap_ms,
            rng=random.Random(seed + 1), **kw))
        self.app = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.app.bind((LOOP, 0))
        self.app.settimeout(0.2)

    def bundle(self, epoch: int) -> PolicyBundle:
        return make_bundle(epoch, {self.MU_A: self.face_a,
                                   self.MU_B: self.face_b})

    def start(self) -> "TunnelRig":
        self.tunnel_a.start()
        self.tunnel_b.start()
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def close(self):
        for t in (self.tunnel_a, self.tunnel_b):
            try:
                t.stop()
            except Exception:
                pass
        self.echo.stop()
        self.app.close()
        for path in self._tmp_files:
            try:
                os.unlink(path)
            except OSError:
                pass

    # --- traffic ------------------------------------------------------------

    def pump(self, n: int, *, tag: bytes = b"m", budget: float = 10.0,
             payload_pad: int = 0) -> int:
        """Drive n echo round trips with app-level retransmit; returns the
        number of distinct round trips completed within the budget."""
        got: set[int] = set()
        pad = b"\x5a" * payload_pad
        deadline = time.time() + budget
        while len(got) < n and time.time() < deadline:
            for i in range(n):
                if i not in got:
                    self.app.sendto(tag + b"%06d" % i + pad,
                                    self.plain_a)
            try:
                while True:
                    data, _ = self.app.recvfrom(65535)
                    if data.startswith(tag):
                        got.add(int(data[len(tag):len(tag) + 6]))
            except socket.timeout:
                pass
        return len(got)

    def one_way(self, payloads: list[bytes]) -> None:
        for p in payloads:
            self.app.sendto(p, self.plain_a)

    # --- control ------------------------------------------------------------

    def write_bundle(self, epoch: int) -> str:
        fd, path = tempfile.mkstemp(suffix=".json", prefix="janus-policy-")
        with os.fdopen(fd, "w") as fh:
            fh.write(bundle_to_json(self.bundle(epoch)))
        self._tmp_files.append(path)
        return path

    def roll_both(self, epoch: int) -> list[dict]:
        path = self.write_bundle(epoch)
        return [
            control_request(self.tunnel_a.control_path,
                            {"cmd": "roll", "policy_path": path}),
            control_request(self.tunnel_b.control_path,
                            {"cmd": "roll", "policy_path": path}),
        ]


def wait_until(predicate, timeout: float = 5.0, interval: float = 0.02) -> bool:
    deadline = time.time() + timeout
    while time.time() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False


def relayed_rig(*, on_flight=None, on_frame=None, **rig_kw):
    """A TunnelRig whose policies pin each peer at a relay face, so all
    traffic crosses the interposer. Returns (relay, rig), both started."""
    from janus.relay import Relay

    relay = Relay(("0.0.0.0", 1), ("0.0.0.0", 1),
                  on_flight=on_flight, on_frame=on_frame)
    rig = TunnelRig(face_a=relay.face_a, face_b=relay.face_b, **rig_kw)
    relay.a_real = rig.bind_a
    relay.b_real = rig.bind_b
    relay.start()
    rig.start()
    return relay, rig
