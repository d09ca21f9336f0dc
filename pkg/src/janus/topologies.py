"""Reference workload shapes for the scalability model.

Three fixed control-plane topologies (used for initialization makespan) and
a synthetic mosaic-pipeline data DAG (used for transfer replay). Every node
gets its own host, so per-host handshake demand equals node out-degree.
"""
from __future__ import annotations

from .errors import ValidationError
from .scale import Dag

MOSAIC_TASKS = 100
MOSAIC_TOTAL_BYTES = 600_000_000


def one_level() -> Dag:
    """Depth 1, max out-degree 2: one root fanning out to two children."""
    nodes = ("n0", "n1", "n2")
    edges = (("n0", "n1", 0), ("n0", "n2", 0))
    return Dag(nodes=nodes, edges=edges)


def two_level() -> Dag:
    """Depth 2, max out-degree 4: root to four children, each with a leaf."""
    nodes = tuple(f"n{i}" for i in range(9))
    edges = tuple((f"n0", f"n{i}", 0) for i in range(1, 5)) + tuple(
        (f"n{i}", f"n{i + 4}", 0) for i in range(1, 5)
    )
    return Dag(nodes=nodes, edges=edges)


def twenty_node_mixed() -> Dag:
    """Depth 5, 20 nodes, max out-degree 8.

    Level sizes 1/8/6/4/1; the root's host carries the eight-handshake
    bottleneck queue.
    """
    nodes = tuple(f"n{i}" for i in range(20))
    edges = []
    edges += [("n0", f"n{i}", 0) for i in range(1, 9)]          # L0 -> L1
    edges += [("n1", "n9", 0), ("n1", "n10", 0), ("n2", "n11", 0),
              ("n3", "n12", 0), ("n4", "n13", 0), ("n5", "n14", 0)]  # L1 -> L2
    edges += [("n9", "n15", 0), ("n10", "n16", 0), ("n11", "n17", 0),
              ("n12", "n18", 0)]                                 # L2 -> L3
    edges += [("n15", "n19", 0)]                                 # L3 -> L4
    return Dag(nodes=nodes, edges=tuple(edges))


def mosaic_pipeline(total_bytes: int = MOSAIC_TOTAL_BYTES) -> Dag:
    """Synthetic 100-task mosaic workflow with fan-out/fan-in data motion.

    Stage-in feeds 37 projection tasks; each projects into a difference
    task; differences gather into a fit/model pair; the model fans out to
    20 correction tasks that gather into a three-task finishing chain.
    Edge bytes are weighted by stage (image-bearing edges heavy, control
    edges light) and scaled to sum exactly to total_bytes.
    """
    if total_bytes <= 0:
        raise ValidationError("total_bytes must be positive")
    width_project = 37
    width_correct = 20
    nodes = ["stage_in"]
    nodes += [f"project_{i}" for i in range(width_project)]
    nodes += [f"diff_{i}" for i in range(width_project)]
    nodes += ["concat_fit", "bg_model"]
    nodes += [f"correct_{i}" for i in range(width_correct)]
    nodes += ["gather", "shrink", "preview"]
    assert len(nodes) == MOSAIC_TASKS

    weighted: list[tuple[str, str, int]] = []
    weighted += [("stage_in", f"project_{i}", 3) for i in range(width_project)]
    weighted += [(f"project_{i}", f"diff_{i}", 4) for i in range(width_project)]
    weighted += [(f"diff_{i}", "concat_fit", 1) for i in range(width_project)]
    weighted += [("concat_fit", "bg_model", 1)]
    weighted += [("bg_model", f"correct_{i}", 4) for i in range(width_correct)]
    weighted += [(f"correct_{i}", "gather", 4) for i in range(width_correct)]
    weighted += [("gather", "shrink", 2), ("shrink", "preview", 1)]

    total_weight = sum(w for _, _, w in weighted)
    edges = []
    assigned = 0
    for i, (src, dst, weight) in enumerate(weighted):
        if i == len(weighted) - 1:
            nbytes = total_bytes - assigned
        else:
            nbytes = total_bytes * weight // total_weight
            assigned += nbytes
        edges.append((src, dst, nbytes))
    return Dag(nodes=tuple(nodes), edges=tuple(edges))


NAMED = {
    "one-level": one_level,
    "two-level": two_level,
    "twenty-node-mixed": twenty_node_mixed,
    "mosaic-100": mosaic_pipeline,
}


def named_dag(name: str) -> Dag:
    try:
        return NAMED[name]()
    except KeyError as exc:
        raise ValidationError(
            f"unknown topology {name!r}; choose from {sorted(NAMED)}"
        ) from exc
