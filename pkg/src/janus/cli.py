"""Command-line front end.

Subcommands: policy, attest, node, tunnel, epoch, scale, scenario, bench.
`JANUS_SEED` (u64) pins every random source; `JANUS_CLOCK` selects sim or
wall time where simulation is meaningful. Exit codes: 0 success, 2
validation error, 3 scenario assertion failure, 4 transport error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import random
import signal
import sys
import threading

from .attestation import AttestationAuthority, CollateralSnapshot
from .clock import WallClock, clock_from_env
from .errors import JanusError, ValidationError
from .node import NodeIdentity, bootstrap_registers, expected_rtmr3
from .policy import (
    bundle_from_json,
    bundle_to_json,
    compute_policy_digest,
    sign_bundle,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SCENARIO = 3
EXIT_TRANSPORT = 4


def seed_from_env() -> int | None:
    raw = os.environ.get("JANUS_SEED")
    if raw is None:
        return None
    try:
        value = int(raw, 0)
    except ValueError as exc:
        raise ValidationError(f"JANUS_SEED must be an integer: {raw!r}") from exc
    if not 0 <= value < 2**64:
        raise ValidationError("JANUS_SEED must fit in u64")
    return value


def _addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port in {text!r}")


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _write_out(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def _load_seed_file(path: str) -> bytes:
    line = _read(path).strip()
    try:
        seed = bytes.fromhex(line)
    except ValueError as exc:
        raise ValidationError(f"{path}: not hex: {exc}") from exc
    if len(seed) != 32:
        raise ValidationError(f"{path}: want 32 bytes, got {len(seed)}")
    return seed


# --- policy ------------------------------------------------------------------


def cmd_policy_digest(args) -> int:
    bundle = bundle_from_json(_read(args.file))
    print(compute_policy_digest(bundle).hex())
    return EXIT_OK


def cmd_policy_sign(args) -> int:
    from cryptography.hazmat.primitives.asymmetric import ed25519

    bundle = bundle_from_json(_read(args.file))
    key = ed25519.Ed25519PrivateKey.from_private_bytes(
        _load_seed_file(args.key))
    pub = key.public_key().public_bytes_raw()
    if bundle.owner_public_key != pub:
        from dataclasses import replace
        bundle = replace(bundle, owner_public_key=pub, signature=None)
    signed = sign_bundle(bundle, key)
    _write_out(bundle_to_json(signed), args.out)
    return EXIT_OK


# --- attest ------------------------------------------------------------------


def _authority_state(path: str) -> tuple[bytes, list[str]]:
    doc = json.loads(_read(path))
    seed = bytes.fromhex(doc["seed"])
    if len(seed) != 32:
        raise ValidationError("authority state seed must be 32 bytes")
    return seed, list(doc.get("revoked", []))


def cmd_attest_keygen(args) -> int:
    seed_source = seed_from_env()
    rng = random.Random(seed_source) if seed_source is not None else random.SystemRandom()
    seed = bytes(rng.getrandbits(8) for _ in range(32))
    _write_out(seed.hex(), args.out)
    if args.state:
        _write_out(json.dumps({"seed": seed.hex(), "revoked": []}, indent=2),
                   args.state)
    authority = AttestationAuthority(seed)
    print(f"authority public key: {authority.public_key.hex()}",
          file=sys.stderr)
    return EXIT_OK


def cmd_attest_revoke(args) -> int:
    try:
        measurement = bytes.fromhex(args.measurement)
    except ValueError as exc:
        raise ValidationError(f"measurement not hex: {exc}") from exc
    if len(measurement) != 48:
        raise ValidationError("measurement must be 48 bytes of hex")
    seed, revoked = _authority_state(args.state)
    if measurement.hex() not in revoked:
        revoked.append(measurement.hex())
    _write_out(json.dumps({"seed": seed.hex(), "revoked": sorted(revoked)},
                          indent=2), args.state)
    print(f"revoked {measurement.hex()}; list now {len(revoked)} entries")
    return EXIT_OK


def cmd_attest_collateral(args) -> int:
    seed, revoked = _authority_state(args.state)
    authority = AttestationAuthority(seed)
    for item in revoked:
        authority.revoke(bytes.fromhex(item))
    snapshot = authority.refresh_collateral(clock_from_env())
    _write_out(snapshot.to_json(), args.out)
    return EXIT_OK


# --- node --------------------------------------------------------------------


def cmd_node_bootstrap(args) -> int:
    with open(args.measurement, "rb") as fh:
        measurement = hashlib.sha384(fh.read()).digest()
    with open(args.proxy, "rb") as fh:
        proxy_digest = hashlib.sha384(fh.read()).digest()
    regs = bootstrap_registers(measurement, proxy_digest,
                               engage_lock=not args.skip_lock)
    identity = NodeIdentity(
        measurement=measurement,
        proxy_digest=proxy_digest,
        bpf_lock=not args.skip_lock,
        pinned_rtmr3=expected_rtmr3(proxy_digest),
    )
    if args.out:
        _write_out(identity.to_json(), args.out)
    print(f"measurement: {measurement.hex()}")
    print(f"rtmr3: {regs.rtmr[3].hex()}")
    if args.skip_lock:
        print("warning: filter lock skipped; rtmr3 will not match the "
              "pinned value", file=sys.stderr)
    return EXIT_OK


# --- tunnel ------------------------------------------------------------------


def _build_tunnel(args):
    from .tunnel import Tunnel, TunnelConfig

    identity_doc = json.loads(_read(args.identity))
    identity = NodeIdentity.from_json(json.dumps(identity_doc))
    if args.authority:
        authority_seed = _load_seed_file(args.authority)
    elif "authority_seed" in identity_doc:
        authority_seed = bytes.fromhex(identity_doc["authority_seed"])
    else:
        raise ValidationError(
            "no authority seed: pass --authority or embed authority_seed "
            "in the identity file")
    bundle = bundle_from_json(_read(args.policy))
    seed = seed_from_env()
    config = TunnelConfig(
        bind=args.bind,
        plain=args.plain,
        identity=identity,
        authority_seed=authority_seed,
        policy=bundle,
        mtu=args.mtu,
        lanes=args.lanes,
        rekey_threshold=args.rekey_threshold,
        control_path=args.control,
        forward=args.forward,
        warmup=args.warmup,
        clock=WallClock(),  # real sockets need real time
        rng=random.Random(seed) if seed is not None else None,
    )
    return Tunnel(config)


def cmd_tunnel_run(args) -> int:
    try:
        tunnel = _build_tunnel(args).start()
    except OSError as exc:
        print(f"bind failed: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    print(json.dumps({
        "ready": True,
        "bind": list(tunnel.config.bind),
        "plain": list(tunnel.config.plain),
        "control": tunnel.control_path,
        "active_epoch": tunnel.active_epoch,
    }), flush=True)
    while not stop.is_set() and not tunnel._stop.is_set():
        stop.wait(0.2)
    tunnel.stop()
    print(json.dumps({"stopped": True, "stats": tunnel.stats()}), flush=True)
    return EXIT_OK


def cmd_tunnel_costs(args) -> int:
    from .tunnel import control_request

    reply = control_request(args.control, {"cmd": "costs"})
    if not reply.get("ok"):
        print(reply.get("error", "unknown failure"), file=sys.stderr)
        return EXIT_TRANSPORT
    _write_out(reply["csv"], args.out)
    return EXIT_OK


# --- epoch -------------------------------------------------------------------


def _discover_control(explicit: str | None) -> str:
    if explicit:
        return explicit
    import glob
    import tempfile

    candidates = glob.glob(os.path.join(tempfile.gettempdir(), "janus-*.ctl"))
    if len(candidates) == 1:
        return candidates[0]
    if not candidates:
        raise ValidationError("no control socket found; pass --control")
    raise ValidationError(
        f"{len(candidates)} control sockets found; pass --control")


def cmd_epoch_roll(args) -> int:
    from .tunnel import control_request

    control = _discover_control(args.control)
    reply = control_request(control,
                            {"cmd": "roll", "policy_path": args.policy})
    print(json.dumps(reply))
    if reply.get("ok"):
        return EXIT_OK
    return EXIT_VALIDATION


# --- scale -------------------------------------------------------------------


def _scenario_doc(path: str) -> dict:
    doc = json.loads(_read(path))
    if not isinstance(doc, dict):
        raise ValidationError("scenario file must hold a JSON object")
    return doc


def _impairments(doc: dict):
    from .scale import Impairments

    return Impairments(
        jitter_sigma_ms=float(doc.get("jitter_sigma_ms", 0.0)),
        loss_probability=float(doc.get("loss_probability", 0.0)),
        min_rto_ms=float(doc.get("min_rto_ms", 200.0)),
        stagger_ms=float(doc.get("stagger_ms", 0.0)),
    )


def _scale_seed(doc: dict) -> int:
    if "seed" in doc:
        return int(doc["seed"])
    env = seed_from_env()
    return 0 if env is None else env


def cmd_scale(args) -> int:
    from . import scale
    from .topologies import named_dag

    doc = _scenario_doc(args.scenario)
    rows: list[list] = []
    if args.op == "closed-form":
        value = scale.closed_form_init(
            int(doc["nodes"]), float(doc["degree"]), int(doc["hosts"]),
            float(doc.get("handshake_ms", scale.REFERENCE_HANDSHAKE_MS)))
        rows.append(["init_ms", value, value, value, value])
    elif args.op == "mc":
        summary, _ = scale.simulate_init(
            int(doc["nodes"]), float(doc["degree"]), int(doc["hosts"]),
            impairments=_impairments(doc),
            trials=int(doc.get("trials", 100_000)),
            seed=_scale_seed(doc))
        rows.append(summary.row("init_ms"))
    elif args.op == "dag":
        summary, _ = scale.simulate_dag_init(
            named_dag(doc["shape"]),
            impairments=_impairments(doc),
            trials=int(doc.get("trials", 100_000)),
            seed=_scale_seed(doc))
        rows.append(summary.row("init_ms"))
    elif args.op == "replay":
        cost = scale.TransferCostModel(
            per_packet_cost_us=float(doc.get("per_packet_cost_us", 6.0)),
            inner_mtu_bytes=int(doc.get("inner_mtu_bytes", 1432)),
            flow_gbps=float(doc.get("flow_gbps", 0.125)))
        result = scale.replay_dag_transfers(
            named_dag(doc.get("shape", "mosaic-100")), cost)
        for metric, value in (("baseline_ms", result.baseline_ms),
                              ("enforced_ms", result.enforced_ms),
                              ("overhead_pct", result.overhead_pct)):
            rows.append([metric, value, value, value, value])
    elif args.op == "rekey":
        summary, _ = scale.rekey_penalty_mc(
            float(doc.get("epoch_duration_s", 5.75)),
            int(doc.get("rotations_per_epoch", 1)),
            detect_ms=float(doc.get("detect_ms", 50.0)),
            trials=int(doc.get("trials", 10_000)),
            seed=_scale_seed(doc))
        rows.append(summary.row("penalty_pct"))
    else:  # pragma: no cover - argparse restricts choices
        raise ValidationError(f"unknown scale op {args.op}")
    _write_out(scale.summaries_to_csv(rows), args.out)
    return EXIT_OK


# --- scenario ----------------------------------------------------------------


def cmd_scenario_run(args) -> int:
    from . import scenarios

    seed = args.seed
    if seed is None:
        env = seed_from_env()
        seed = 0 if env is None else env
    report = scenarios.run(args.name, seed=seed)
    text = json.dumps(report, indent=2)
    _write_out(text, args.out)
    if not report["passed"]:
        failing = [a["name"] for a in report["assertions"] if not a["ok"]]
        print(f"scenario {args.name} failed: {', '.join(failing)}",
              file=sys.stderr)
        return EXIT_SCENARIO
    return EXIT_OK


def cmd_scenario_list(args) -> int:
    from . import scenarios

    for name in scenarios.NAMES:
        print(name)
    return EXIT_OK


# --- bench -------------------------------------------------------------------


def cmd_bench(args) -> int:
    from .bench import run_bench

    csv = run_bench(count=args.count, payload=args.payload,
                    seed=_scale_seed({}))
    _write_out(csv, args.out)
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="janus",
        description="Attested confidential interconnect toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("policy", help="policy authoring and inspection")
    psub = p.add_subparsers(dest="op", required=True)
    d = psub.add_parser("digest", help="print the 48-byte policy digest")
    d.add_argument("file")
    d.set_defaults(func=cmd_policy_digest)
    s = psub.add_parser("sign", help="sign a bundle with an owner key")
    s.add_argument("file")
    s.add_argument("--key", required=True, help="owner seed file (hex)")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_policy_sign)

    p = sub.add_parser("attest", help="attestation authority tooling")
    asub = p.add_subparsers(dest="op", required=True)
    k = asub.add_parser("keygen", help="generate an authority seed")
    k.add_argument("--out", default=None, help="seed file (hex, one line)")
    k.add_argument("--state", default=None,
                   help="also write a JSON authority state file")
    k.set_defaults(func=cmd_attest_keygen)
    r = asub.add_parser("revoke", help="revoke a measurement")
    r.add_argument("measurement", help="48-byte measurement, hex")
    r.add_argument("--state", required=True)
    r.set_defaults(func=cmd_attest_revoke)
    c = asub.add_parser("collateral", help="emit a collateral snapshot")
    c.add_argument("--state", required=True)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_attest_collateral)

    p = sub.add_parser("node", help="node identity bootstrap")
    nsub = p.add_subparsers(dest="op", required=True)
    b = nsub.add_parser("bootstrap", help="measured boot; prints RTMR3")
    b.add_argument("--measurement", required=True,
                   help="file whose SHA-384 is the node measurement")
    b.add_argument("--proxy", required=True,
                   help="file whose SHA-384 stands in for the proxy binary")
    b.add_argument("--skip-lock", action="store_true",
                   help="model a boot that skipped the filter lock")
    b.add_argument("--out", default=None, help="write identity JSON here")
    b.set_defaults(func=cmd_node_bootstrap)

    p = sub.add_parser("tunnel", help="run or query a tunnel")
    tsub = p.add_subparsers(dest="op", required=True)
    t = tsub.add_parser("run", help="run a tunnel until signalled")
    t.add_argument("--bind", type=_addr, required=True)
    t.add_argument("--plain", type=_addr, required=True)
    t.add_argument("--policy", required=True)
    t.add_argument("--identity", required=True)
    t.add_argument("--mtu", type=int, default=1500)
    t.add_argument("--lanes", type=int, default=4)
    t.add_argument("--rekey-threshold", type=int,
                   default=2**32 - 2**20)
    t.add_argument("--authority", default=None,
                   help="authority seed file; defaults to the identity's "
                        "authority_seed field")
    t.add_argument("--control", default=None,
                   help="control socket path (default under tmpdir)")
    t.add_argument("--forward", type=_addr, default=None,
                   help="deliver decrypted datagrams here instead of the "
                        "last plain-side sender")
    t.add_argument("--warmup", type=int, default=100)
    t.set_defaults(func=cmd_tunnel_run)
    tc = tsub.add_parser("costs", help="fetch the per-packet cost CSV")
    tc.add_argument("--control", required=True)
    tc.add_argument("--out", default=None)
    tc.set_defaults(func=cmd_tunnel_costs)

    p = sub.add_parser("epoch", help="epoch rollover against a tunnel")
    esub = p.add_subparsers(dest="op", required=True)
    e = esub.add_parser("roll", help="install a new policy epoch")
    e.add_argument("--policy", required=True, help="signed bundle JSON")
    e.add_argument("--control", default=None,
                   help="control socket (auto-discovered when unique)")
    e.set_defaults(func=cmd_epoch_roll)

    p = sub.add_parser("scale", help="initialization-time model front end")
    p.add_argument("op", choices=["closed-form", "mc", "dag", "replay",
                                  "rekey"])
    p.add_argument("--scenario", required=True, help="model parameters JSON")
    p.add_argument("--out", default=None, help="CSV destination")
    p.set_defaults(func=cmd_scale)

    p = sub.add_parser("scenario", help="adversarial scenario runner")
    ssub = p.add_subparsers(dest="op", required=True)
    sr = ssub.add_parser("run")
    sr.add_argument("name")
    sr.add_argument("--seed", type=int, default=None)
    sr.add_argument("--out", default=None, help="report JSON destination")
    sr.set_defaults(func=cmd_scenario_run)
    sl = ssub.add_parser("list")
    sl.set_defaults(func=cmd_scenario_list)

    p = sub.add_parser("bench", help="in-process seal/open cost benchmark")
    p.add_argument("--count", type=int, default=10_000)
    p.add_argument("--payload", type=int, default=1400)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except JanusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, IsADirectoryError, PermissionError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:  # sockets: unreachable peers, refused connects
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
