"""Bundled scenarios, one per reproduced experiment.

Each preset is a partial flat config; anything not listed takes the
schema default.
"""

from __future__ import annotations

from typing import Any

from . import config as cfgmod

PRESETS: dict[str, dict[str, Any]] = {
    # NIC overload: more closed-loop posters on one QP eventually thrash
    # the WQE cache and IOPS falls.  Swept over actors 1..12.
    "fig1": {
        "actors": 1,
        "batching.mode": "single",
        "host.cpus": 0,
        "nic.wqe_cache_slots": 48,
        "polling.strategy": "busy",
        "replay.mode": "closed",
        "replay.think_ns": 40_000,
        "workload.kind": "burst",
        "workload.cluster_size": 8,
        "workload.inter_burst_gap": 1_000,
        "workload.req_len": 4096,
        "workload.requests": 4800,
    },
    # Completion handling under bursty closed-loop traffic from one thread.
    "fig2": {
        "actors": 1,
        "batching.mode": "single",
        "host.cpus": 0,
        "replay.mode": "closed",
        "workload.kind": "burst",
        "workload.preset": "medium",
        "workload.inter_burst_gap": 5_000,
        "workload.req_len": 4096,
        "workload.requests": 4000,
    },
    # Tail latency of the batching modes on a key-value mix.
    "fig5": {
        "actors": 4,
        "batching.mode": "hybrid",
        "workload.kind": "kv",
        "workload.preset": "etc",
        "workload.requests": 20_000,
        "workload.mean_gap_ns": 1500.0,
    },
    # Overload over 4 QPs per node with merging on.  Clusters hit one
    # node back to back so adjacent requests can merge; exponential think
    # keeps actors from falling into lockstep.
    "fig7": {
        "actors": 1,
        "qps_per_node": 4,
        "batching.mode": "hybrid",
        "host.cpus": 0,
        "nic.wqe_cache_slots": 48,
        "admission.fragment_bytes": 4096,
        "polling.strategy": "busy",
        "replay.mode": "closed",
        "replay.think_ns": 40_000,
        "replay.think_dist": "exp",
        "workload.kind": "burst",
        "workload.cluster_size": 8,
        "workload.sequential_clusters": True,
        "workload.inter_burst_gap": 1_000,
        "workload.req_len": 4096,
        "workload.requests": 4800,
        "report.sample_interval_ns": 10_000,
    },
    # Peer-count scalability with a fixed CPU budget.  Each cluster goes
    # to one peer, so a CQ sees short bursts separated by idle time.
    "fig8": {
        "actors": 8,
        "peers": 1,
        "batching.mode": "single",
        "host.cpus": 8,
        "polling.handle_ns": 3_000,
        "replay.mode": "closed",
        "replay.think_on_cpu": True,
        "replay.think_ns": 20_000,
        "workload.kind": "burst",
        "workload.cluster_size": 8,
        "workload.sequential_clusters": True,
        "workload.req_len": 4096,
        "workload.requests": 3200,
    },
    # I/O counts of the batching modes on a write-heavy trace.  Open-loop
    # replay and a send queue deeper than the trace mean posting never
    # blocks, so batches form identically whatever the doorbell mode.
    "table1": {
        "actors": 8,
        "batching.mode": "hybrid",
        "host.cpus": 0,
        "host.mempool_slots": 65536,
        "host.send_queue_depth": 131_072,
        "replay.mode": "open",
        "workload.kind": "kv",
        "workload.preset": "sys",
        "workload.requests": 100_000,
        "workload.mean_gap_ns": 1500.0,
    },
}


def preset(name: str, **overrides: Any) -> dict[str, Any]:
    """Resolved config for a bundled preset."""
    try:
        base = PRESETS[name]
    except KeyError:
        raise cfgmod.ConfigError("preset", f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return cfgmod.resolve({**base, **overrides})
