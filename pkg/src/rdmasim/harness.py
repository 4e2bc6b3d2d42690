"""Parameter sweeps and the two calibration procedures."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from . import config as cfgmod
from .scenario import Scenario, make_trace
from .workload import BurstSpec, gen_burst

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = (
    "value",
    "iops",
    "bandwidth_bytes_per_s",
    "latency_mean",
    "latency_p99",
    "io_completion_mean",
    "in_flight_ops_mean",
    "in_flight_bytes_mean",
    "in_flight_bytes_variance",
    "wqe_posted",
    "mmio_count",
    "merges",
    "chains",
    "interrupts",
    "context_switches",
    "poller_busy_ns",
)


def _run_one(cfg: dict[str, Any]) -> dict[str, Any]:
    return Scenario(cfg).run().report()


def sweep(
    cfg: Mapping[str, Any], axis: str, values: Sequence[Any], jobs: int = 1
) -> list[dict[str, Any]]:
    """One report per value of ``axis``; scenarios share no state."""
    if axis not in cfgmod.SCHEMA:
        raise cfgmod.ConfigError(axis, "unknown sweep axis")
    if not values:
        raise cfgmod.ConfigError(axis, "no sweep values")
    base = cfgmod.resolve(cfg)
    configs = [cfgmod.resolve({**base, axis: v}) for v in values]
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, configs))
    return [_run_one(c) for c in configs]


def summary_row(report: Mapping[str, Any], axis: str | None = None) -> dict[str, Any]:
    c = report["counters"]
    g = report["gauges"]
    h = report["histograms"]
    return {
        "value": report["config"][axis] if axis else None,
        "iops": report["iops"],
        "bandwidth_bytes_per_s": report["bandwidth_bytes_per_s"],
        "latency_mean": h["request_latency"]["mean"],
        "latency_p99": h["request_latency"]["p99"],
        "io_completion_mean": h["io_completion_time"]["mean"],
        "in_flight_ops_mean": g["in_flight_ops"]["mean"],
        "in_flight_bytes_mean": g["in_flight_bytes"]["mean"],
        "in_flight_bytes_variance": g["in_flight_bytes"]["series_variance"],
        "wqe_posted": c["wqe_posted"],
        "mmio_count": c["mmio_count"],
        "merges": c["merges"],
        "chains": c["chains"],
        "interrupts": c["interrupts"],
        "context_switches": c["context_switches"],
        "poller_busy_ns": report["cpu"]["poller_busy_ns"],
    }


def summary_table(reports: Sequence[Mapping[str, Any]], axis: str) -> list[dict[str, Any]]:
    return [summary_row(r, axis) for r in reports]


def format_table(rows: Sequence[Mapping[str, Any]]) -> str:
    cols = SUMMARY_COLUMNS
    cells = [[_fmt(row[c]) for c in cols] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.1f}"
    return str(v)


@dataclass
class WindowCalibration:
    window_bytes: int
    peak_actors: int
    interior_peak: bool
    rows: list[dict[str, Any]] = field(default_factory=list)
    warning: str = ""


def calibrate_window(
    cfg: Mapping[str, Any], actors: Sequence[int] = tuple(range(1, 13)), jobs: int = 1
) -> WindowCalibration:
    """Sweep actors with no regulation; the window is the mean in-flight
    bytes at the actor count with the highest IOPS."""
    base = cfgmod.resolve(cfg)
    if base["admission.window_bytes"]:
        raise cfgmod.ConfigError("admission.window_bytes", "calibration needs the regulator disabled (0)")
    reports = sweep(base, "actors", list(actors), jobs)
    rows = summary_table(reports, "actors")
    best = max(range(len(rows)), key=lambda i: (rows[i]["iops"], -i))
    interior = 0 < best < len(rows) - 1 or len(rows) == 1
    warning = ""
    if not interior:
        best = len(rows) - 1
        warning = f"no interior IOPS peak over actors={list(actors)}; using in-flight bytes at actors={actors[best]}"
        log.warning(warning)
    mean = rows[best]["in_flight_bytes_mean"]
    frag = base["admission.fragment_bytes"]
    need = -(-min(base["workload.req_len"], base["batching.max_merged_bytes"]) // frag) * frag
    window = max(need, int(-(-mean // 1)))
    return WindowCalibration(window, actors[best], interior, rows, warning)


@dataclass
class LargeCalibration:
    cluster_size: int
    throughputs: dict[int, float]
    capped: bool


def calibrate_large(
    cfg: Mapping[str, Any], sizes: Sequence[int] = (1, 2, 4, 8, 16, 32, 64), min_gain: float = 0.10
) -> LargeCalibration:
    """Smallest cluster size at which Busy polling's throughput stops
    growing (next size gains less than ``min_gain``)."""
    base = dict(cfgmod.resolve(cfg))
    base.update({"polling.strategy": "busy", "workload.kind": "burst", "workload.preset": "", "replay.mode": "closed"})
    base = cfgmod.resolve(base)
    tput: dict[int, float] = {}
    for k in sizes:
        spec = BurstSpec(
            cluster_size=k,
            inter_burst_gap=base["workload.inter_burst_gap"],
            intra_burst_gap=base["workload.intra_burst_gap"],
            total_requests=max(k * 20, min(base["workload.requests"], k * 60)),
            req_len=base["workload.req_len"],
            nodes=base["peers"],
            actors=base["actors"],
            keyspace=base["workload.keyspace"],
            read_fraction=base["workload.read_fraction"],
        )
        sc = Scenario(base, gen_burst(spec, base["seed"])).run()
        tput[k] = sc.bandwidth
    for a, b in zip(sizes, sizes[1:]):
        if tput[b] < tput[a] * (1 + min_gain):
            return LargeCalibration(a, tput, False)
    log.warning("busy-polling throughput still rising at cluster size %d; using it", sizes[-1])
    return LargeCalibration(sizes[-1], tput, True)


def gen_trace(cfg: Mapping[str, Any]):
    return make_trace(cfgmod.resolve(cfg))
