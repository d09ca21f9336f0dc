"""Initialization-time and overhead models for attested interconnect rollout.

The central quantity is the time to bring up all pairwise sessions of a
workflow when every handshake must pass through its host's single quoting
enclave. With N nodes of mean degree e spread over H hosts, the closed form
is

    T_init ~= (N * e / H) * t_handshake

with t_handshake = 103.2 ms at the reference calibration (75.6 ms quote
generation + 24.1 ms collateral verification + 3.5 ms network and ECDH).

The Monte Carlo variants perturb the underlying calibration constants once
per trial (quote generation triangular 70/75.6/105 ms; verification normal
with mean 24.1 ms and sigma 12.0 ms, negatives resampled) and then run the
per-host FIFO schedule with those constants, so trial-to-trial spread
reflects uncertainty in the constants themselves rather than averaging out
with handshake count. Impairments sample per handshake: normal network
jitter plus per-flight loss, each lost flight costing one minimum RTO.

All times in milliseconds unless a name says otherwise.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter

import numpy as np

from .errors import ValidationError

FLIGHTS_PER_HANDSHAKE = 3
REFERENCE_HANDSHAKE_MS = 103.2


# --- sampled distributions --------------------------------------------------

@dataclass(frozen=True)
class Dist:
    """Scalar distribution: 'constant', 'triangular', or 'normal'.

    params: constant -> (value,); triangular -> (low, mode, high);
    normal -> (mean, sigma), truncated at zero by resampling.
    """

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        expected = {"constant": 1, "triangular": 3, "normal": 2}
        if self.kind not in expected:
            raise ValidationError(f"unknown distribution {self.kind!r}")
        if len(self.params) != expected[self.kind]:
            raise ValidationError(
                f"{self.kind} needs {expected[self.kind]} parameters"
            )
        if self.kind == "triangular":
            low, mode, high = self.params
            if not low <= mode <= high:
                raise ValidationError("triangular needs low <= mode <= high")

    @property
    def center(self) -> float:
        """Reference point: the constant, the mode, or the mean."""
        if self.kind == "triangular":
            return self.params[1]
        return self.params[0]

    @property
    def is_degenerate(self) -> bool:
        if self.kind == "constant":
            return True
        if self.kind == "triangular":
            return self.params[0] == self.params[2]
        return self.params[1] == 0.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(size, self.params[0])
        if self.kind == "triangular":
            low, mode, high = self.params
            if low == high:
                return np.full(size, mode)
            return rng.triangular(low, mode, high, size)
        mean, sigma = self.params
        if sigma == 0.0:
            return np.full(size, mean)
        out = rng.normal(mean, sigma, size)
        bad = out < 0.0
        while bad.any():
            out[bad] = rng.normal(mean, sigma, int(bad.sum()))
            bad = out < 0.0
        return out


@dataclass(frozen=True)
class LatencyModel:
    quote_gen: Dist = Dist("triangular", (70.0, 75.6, 105.0))
    dcap_verify: Dist = Dist("normal", (24.1, 12.0))
    net_crypto_ms: float = 3.5

    @property
    def reference_ms(self) -> float:
        return self.quote_gen.center + self.dcap_verify.center + self.net_crypto_ms

    def sample_handshake(self, rng: np.random.Generator, trials: int) -> np.ndarray:
        """One full-handshake duration per trial (the perturbed constants)."""
        return (self.quote_gen.sample(rng, trials)
                + self.dcap_verify.sample(rng, trials)
                + self.net_crypto_ms)


def deterministic_latency(handshake_ms: float = REFERENCE_HANDSHAKE_MS) -> LatencyModel:
    """All-constant model; Monte Carlo percentiles collapse onto Eq-free
    closed-form arithmetic."""
    return LatencyModel(
        quote_gen=Dist("constant", (handshake_ms,)),
        dcap_verify=Dist("constant", (0.0,)),
        net_crypto_ms=0.0,
    )


@dataclass(frozen=True)
class Impairments:
    jitter_sigma_ms: float = 0.0
    loss_probability: float = 0.0
    min_rto_ms: float = 200.0
    stagger_ms: float = 0.0  # spacing between handshake releases per host

    def __post_init__(self):
        if not 0.0 <= self.loss_probability < 1.0:
            raise ValidationError("loss probability must be in [0, 1)")
        if self.jitter_sigma_ms < 0 or self.min_rto_ms < 0 or self.stagger_ms < 0:
            raise ValidationError("impairment magnitudes must be non-negative")


# --- results ----------------------------------------------------------------

PERCENTILES = (5, 50, 95, 99)


@dataclass(frozen=True)
class PercentileSummary:
    p5: float
    p50: float
    p95: float
    p99: float
    count: int

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "PercentileSummary":
        q = np.percentile(samples, PERCENTILES)
        return cls(p5=float(q[0]), p50=float(q[1]), p95=float(q[2]),
                   p99=float(q[3]), count=int(samples.size))

    def row(self, metric: str) -> list:
        return [metric, self.p5, self.p50, self.p95, self.p99]


def summaries_to_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["metric", "P5", "P50", "P95", "P99"])
    writer.writerows(rows)
    return buf.getvalue()


# --- closed form ------------------------------------------------------------

def closed_form_init(nodes: int, degree: float, hosts: int,
                     handshake_ms: float = REFERENCE_HANDSHAKE_MS) -> float:
    """Expected initialization time in ms for uniform degree."""
    if nodes <= 0 or hosts <= 0:
        raise ValidationError("nodes and hosts must be positive")
    if degree < 0 or handshake_ms < 0:
        raise ValidationError("degree and handshake cost must be non-negative")
    return (nodes * degree / hosts) * handshake_ms


# --- uniform-degree Monte Carlo ---------------------------------------------

def _per_host_extras(rng: np.random.Generator, impair: Impairments,
                     handshakes: int, trials: int) -> np.ndarray:
    """Loss and jitter contributions for one host across all trials."""
    extra = np.zeros(trials)
    if impair.loss_probability > 0.0 and handshakes > 0:
        flights = handshakes * FLIGHTS_PER_HANDSHAKE
        lost = rng.binomial(flights, impair.loss_probability, trials)
        extra += lost * impair.min_rto_ms
    if impair.jitter_sigma_ms > 0.0 and handshakes > 0:
        extra += rng.normal(0.0, impair.jitter_sigma_ms * math.sqrt(handshakes),
                            trials)
    return extra


def simulate_init(nodes: int, degree: float, hosts: int, *,
                  latency: LatencyModel = LatencyModel(),
                  impairments: Impairments = Impairments(),
                  trials: int = 100_000,
                  seed: int = 0) -> tuple[PercentileSummary, np.ndarray]:
    """Monte Carlo initialization time for a uniform mean-degree workload.

    Handshake demand is spread evenly across hosts (the fractional
    N * e / H per-host load), each host serving its share through the
    quoting enclave FIFO one full handshake at a time.
    """
    if trials <= 0:
        raise ValidationError("trials must be positive")
    closed_form_init(nodes, degree, hosts)  # rejects bad topology arguments
    load = nodes * degree / hosts
    rng = np.random.default_rng(seed)
    unit = latency.sample_handshake(rng, trials)
    queue_span = load * unit
    if impairments.stagger_ms > 0.0 and load > 1.0:
        released = (load - 1.0) * impairments.stagger_ms + unit
        queue_span = np.maximum(queue_span, released)
    totals = queue_span + _per_host_extras(
        rng, impairments, max(1, round(load)) if load > 0 else 0, trials
    )
    return PercentileSummary.from_samples(totals), totals


# --- explicit DAG workloads -------------------------------------------------

@dataclass(frozen=True)
class Dag:
    """Directed acyclic workload: nodes, transfer edges, node placement.

    placement maps node -> host id; omitted nodes get a host of their own.
    Edge bytes only matter for transfer replay; zero means control-only.
    """

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str, int], ...]
    placement: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.nodes)
        if len(known) != len(self.nodes):
            raise ValidationError("duplicate node names")
        seen = set()
        graph: dict[str, set[str]] = {n: set() for n in self.nodes}
        for src, dst, nbytes in self.edges:
            if src not in known or dst not in known:
                raise ValidationError(f"edge {src}->{dst} names unknown node")
            if src == dst:
                raise ValidationError(f"self edge on {src}")
            if (src, dst) in seen:
                raise ValidationError(f"duplicate edge {src}->{dst}")
            if nbytes < 0:
                raise ValidationError("edge bytes must be non-negative")
            seen.add((src, dst))
            graph[dst].add(src)
        try:
            tuple(TopologicalSorter(graph).static_order())
        except CycleError as exc:
            raise ValidationError("workload graph contains a cycle") from exc

    def host_of(self, node: str) -> int:
        if node in self.placement:
            return self.placement[node]
        return self.nodes.index(node)

    def host_handshake_counts(self) -> dict[int, int]:
        """Edges charged to the initiating node's host."""
        counts: dict[int, int] = {}
        for src, _dst, _nbytes in self.edges:
            host = self.host_of(src)
            counts[host] = counts.get(host, 0) + 1
        return counts

    @property
    def depth(self) -> int:
        order = self._topo_order()
        level = {n: 1 for n in self.nodes}
        for n in order:
            for src, dst, _ in self.edges:
                if src == n:
                    level[dst] = max(level[dst], level[n] + 1)
        return max(level.values()) if level else 0

    @property
    def max_out_degree(self) -> int:
        out: dict[str, int] = {}
        for src, _dst, _ in self.edges:
            out[src] = out.get(src, 0) + 1
        return max(out.values()) if out else 0

    def _topo_order(self) -> tuple[str, ...]:
        graph: dict[str, set[str]] = {n: set() for n in self.nodes}
        for src, dst, _ in self.edges:
            graph[dst].add(src)
        return tuple(TopologicalSorter(graph).static_order())


def simulate_dag_init(dag: Dag, *,
                      latency: LatencyModel = LatencyModel(),
                      impairments: Impairments = Impairments(),
                      trials: int = 100_000,
                      seed: int = 0) -> tuple[PercentileSummary, np.ndarray]:
    """Makespan of establishing one session per DAG edge.

    Each edge's handshake occupies the initiating host's quoting enclave for
    one full handshake; hosts run their queues in parallel, so the makespan
    is the slowest host's queue, bounded below by the largest single-host
    out-degree.
    """
    if trials <= 0:
        raise ValidationError("trials must be positive")
    rng = np.random.default_rng(seed)
    unit = latency.sample_handshake(rng, trials)
    counts = dag.host_handshake_counts()
    if not counts:
        zero = np.zeros(trials)
        return PercentileSummary.from_samples(zero), zero
    per_host = np.empty((len(counts), trials))
    for row, handshakes in enumerate(counts.values()):
        span = handshakes * unit
        if impairments.stagger_ms > 0.0 and handshakes > 1:
            span = np.maximum(span,
                              (handshakes - 1) * impairments.stagger_ms + unit)
        per_host[row] = span + _per_host_extras(rng, impairments, handshakes,
                                                trials)
    totals = per_host.max(axis=0)
    return PercentileSummary.from_samples(totals), totals


# --- transfer replay --------------------------------------------------------

@dataclass(frozen=True)
class TransferCostModel:
    per_packet_cost_us: float = 6.0
    inner_mtu_bytes: int = 1432
    flow_gbps: float = 0.125  # effective per-transfer goodput

    def __post_init__(self):
        if self.per_packet_cost_us < 0:
            raise ValidationError("per-packet cost must be non-negative")
        if self.inner_mtu_bytes <= 0 or self.flow_gbps <= 0:
            raise ValidationError("mtu and goodput must be positive")

    def transfer_ms(self, nbytes: int, enforced: bool) -> float:
        wire_ms = nbytes * 8 / (self.flow_gbps * 1e9) * 1e3
        if not enforced or nbytes == 0:
            return wire_ms
        packets = math.ceil(nbytes / self.inner_mtu_bytes)
        return wire_ms + packets * self.per_packet_cost_us * 1e-3


@dataclass(frozen=True)
class ReplayResult:
    baseline_ms: float
    enforced_ms: float

    @property
    def overhead_pct(self) -> float:
        if self.baseline_ms == 0.0:
            return 0.0
        return (self.enforced_ms - self.baseline_ms) / self.baseline_ms * 100.0


def replay_dag_transfers(dag: Dag,
                         cost: TransferCostModel = TransferCostModel()) -> ReplayResult:
    """Replay the DAG's byte transfers with and without per-packet
    enforcement cost; the makespan is the critical path of transfer times."""

    def makespan(enforced: bool) -> float:
        completion = {n: 0.0 for n in dag.nodes}
        for node in dag._topo_order():
            for src, dst, nbytes in dag.edges:
                if src == node:
                    done = completion[src] + cost.transfer_ms(nbytes, enforced)
                    completion[dst] = max(completion[dst], done)
        return max(completion.values()) if completion else 0.0

    return ReplayResult(baseline_ms=makespan(False), enforced_ms=makespan(True))


# --- rekey stall model ------------------------------------------------------

def rekey_penalty_mc(epoch_duration_s: float = 5.75,
                     rotations_per_epoch: int = 1, *,
                     latency: LatencyModel = LatencyModel(),
                     detect_ms: float = 50.0,
                     trials: int = 10_000,
                     seed: int = 0) -> tuple[PercentileSummary, np.ndarray]:
    """Throughput penalty of mid-epoch key rotations, in percent.

    Each rotation stalls transmission for one drain-poll detection interval
    plus one sampled handshake; the penalty is total stalled time over the
    epoch duration.
    """
    if epoch_duration_s <= 0:
        raise ValidationError("epoch duration must be positive")
    if rotations_per_epoch < 0:
        raise ValidationError("rotation count must be non-negative")
    rng = np.random.default_rng(seed)
    stalled = np.zeros(trials)
    for _ in range(rotations_per_epoch):
        stalled += detect_ms + latency.sample_handshake(rng, trials)
    penalty_pct = stalled / (epoch_duration_s * 1e3) * 100.0
    return PercentileSummary.from_samples(penalty_pct), penalty_pct


# --- model-versus-measurement comparison ------------------------------------

def mean_absolute_pct_error(pairs: list[tuple[float, float]]) -> float:
    """MAPE of (modeled, measured) pairs, in percent."""
    if not pairs:
        raise ValidationError("need at least one (model, measured) pair")
    total = 0.0
    for modeled, measured in pairs:
        if measured == 0:
            raise ValidationError("measured value of zero cannot be scored")
        total += abs(modeled - measured) / abs(measured)
    return total / len(pairs) * 100.0
