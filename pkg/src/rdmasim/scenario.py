"""Build a simulation from a resolved config, run it, and report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from . import config as cfgmod
from .admission import TrafficRegulator
from .batching import Batcher, BatchPolicy
from .kernel import Signal, SimulationError, Simulator
from .nic import Nic
from .polling import CpuModel, PollCosts, Poller, SharedCq, make_strategy
from .verbs import DataRequest, Session, SessionConfig, Space
from .workload import (
    MIXES,
    BurstSpec,
    MixSpec,
    Trace,
    TraceRecord,
    burst_preset,
    gen_burst,
    gen_kv,
    load_trace,
)

SCHEMA_VERSION = 1


class Actor:
    """A simulated application thread replaying its share of the trace."""

    def __init__(self, scenario: "Scenario", actor_id: int, records: list[TraceRecord]):
        self.scenario = scenario
        self.actor_id = actor_id
        self.records = records
        self.outstanding = 0
        self.issued = 0
        self._wake: Signal | None = None

    def notify(self) -> None:
        self.outstanding -= 1
        if self._wake is not None:
            wake, self._wake = self._wake, None
            wake.fire()

    def _wait(self):
        self._wake = Signal(self.scenario.sim)
        yield self._wake

    def _issue(self, rec: TraceRecord):
        sc = self.scenario
        depth = sc.cfg["replay.depth"]
        while depth and self.outstanding >= depth:
            yield from self._wait()
        if sc.cfg["replay.issue_ns"]:
            yield from sc.cpu.work(sc.cfg["replay.issue_ns"])
        r = DataRequest(sc.next_req_id(), rec.direction, rec.node, rec.remote_addr, rec.length, sc.sim.now, self.actor_id)
        self.outstanding += 1
        self.issued += 1
        yield from sc.batcher.req_msg(r)

    def run_open(self):
        sim = self.scenario.sim
        for rec in self.records:
            if rec.arrive_at > sim.now:
                yield rec.arrive_at - sim.now
            yield from self._issue(rec)

    def run_closed(self):
        sc = self.scenario
        clusters: list[list[TraceRecord]] = []
        for rec in self.records:
            if clusters and clusters[-1][-1].arrive_at == rec.arrive_at:
                clusters[-1].append(rec)
            else:
                clusters.append([rec])
        think = sc.cfg["replay.think_ns"]
        rng = np.random.default_rng([sc.cfg["seed"], self.actor_id]) if sc.cfg["replay.think_dist"] == "exp" else None
        for i, cluster in enumerate(clusters):
            for rec in cluster:
                yield from self._issue(rec)
            while self.outstanding:
                yield from self._wait()
            if i + 1 == len(clusters):
                break
            gap = think if think >= 0 else clusters[i + 1][0].arrive_at - cluster[-1].arrive_at
            if rng is not None:
                gap = int(rng.exponential(gap)) if gap else 0
            if gap > 0:
                if sc.cfg["replay.think_on_cpu"]:
                    yield from sc.cpu.work(gap)
                else:
                    yield gap


def make_trace(cfg: Mapping[str, Any], large_cluster: int | None = None) -> Trace:
    kind = cfg["workload.kind"]
    if kind == "trace":
        try:
            trace = load_trace(cfg["workload.trace_path"])
        except OSError as e:
            raise cfgmod.ConfigError("workload.trace_path", str(e)) from None
        return trace
    if kind == "kv":
        preset = cfg["workload.preset"]
        read_fraction = MIXES[preset].read_fraction if preset else cfg["workload.read_fraction"]
        mix = MixSpec(
            read_fraction=read_fraction,
            zipf_theta=cfg["workload.zipf_theta"],
            keyspace=cfg["workload.keyspace"],
            nodes=cfg["peers"],
            seq_prob=cfg["workload.seq_prob"],
            req_len=cfg["workload.req_len"],
            mean_gap_ns=cfg["workload.mean_gap_ns"],
            actors=cfg["actors"],
        )
        return gen_kv(mix, max(1, cfg["workload.requests"]), cfg["seed"]) if cfg["workload.requests"] else []
    fields = dict(
        inter_burst_gap=cfg["workload.inter_burst_gap"],
        intra_burst_gap=cfg["workload.intra_burst_gap"],
        total_requests=cfg["workload.requests"],
        req_len=cfg["workload.req_len"],
        nodes=cfg["peers"],
        actors=cfg["actors"],
        keyspace=cfg["workload.keyspace"],
        read_fraction=cfg["workload.read_fraction"],
        sequential=cfg["workload.sequential_clusters"],
    )
    preset = cfg["workload.preset"]
    if preset:
        if large_cluster is None:
            large_cluster = cfg["workload.large_cluster"] or calibrated_large(cfg)
        spec = burst_preset(preset, large_cluster, **fields)
    else:
        spec = BurstSpec(cluster_size=cfg["workload.cluster_size"], **fields)
    return gen_burst(spec, cfg["seed"])


_LARGE_CACHE: dict[str, int] = {}


def calibrated_large(cfg: Mapping[str, Any]) -> int:
    from .harness import calibrate_large

    key = json.dumps(dict(cfg), sort_keys=True)
    if key not in _LARGE_CACHE:
        _LARGE_CACHE[key] = calibrate_large(cfg).cluster_size
    return _LARGE_CACHE[key]


class Scenario:
    def __init__(self, cfg: Mapping[str, Any], trace: Sequence[TraceRecord] | None = None):
        self.cfg = dict(cfg)
        cfg = self.cfg
        self.trace = list(trace) if trace is not None else make_trace(cfg)
        peers = cfg["peers"]
        for i, rec in enumerate(self.trace):
            if rec.node >= peers:
                raise cfgmod.ConfigError("peers", f"trace record {i} targets node {rec.node} but peers={peers}")

        self.sim = sim = Simulator()
        self.nic = Nic(sim, cfgmod.nic_config(cfg), cfgmod.mr_costs(cfg))
        self.session = Session(
            sim,
            self.nic,
            SessionConfig(
                space=Space(cfg["space"]),
                send_queue_depth=cfg["host.send_queue_depth"],
                slot_bytes=cfg["host.slot_bytes"],
                mempool_slots=cfg["host.mempool_slots"],
            ),
        )
        self.cpu = CpuModel(cfg["host.cpus"])
        inflight = sim.metrics.gauges["in_flight_bytes"]
        self.regulator = TrafficRegulator(
            cfg["admission.window_bytes"], cfg["admission.fragment_bytes"], on_change=inflight.set
        )
        for rec in self.trace:
            self.regulator.check_need(rec.length)
        self.policy = BatchPolicy(
            mode=cfg["batching.mode"],
            max_chaining_size=cfg["batching.max_chaining_size"],
            mr_strategy=cfg["batching.mr_strategy"],
            auto_threshold=cfg["batching.auto_threshold"],
            max_merged_bytes=cfg["batching.max_merged_bytes"],
            merge_check_ns=cfg["batching.merge_check_ns"],
            wr_build_ns=cfg["batching.wr_build_ns"],
        )
        self.batcher = Batcher(sim, self.session, self.policy, self.regulator, self.cpu, cfg["batching.queue_capacity"])
        self.session.register_handler(self.batcher.on_completion)

        self.strategy = make_strategy(
            cfg["polling.strategy"],
            max_poll_wc=cfg["polling.max_poll_wc"],
            max_retry=cfg["polling.max_retry"],
            reset_retry=cfg["polling.reset_retry"],
            budget=cfg["polling.budget"],
            m=cfg["polling.m"],
        )
        costs = PollCosts(
            cfg["polling.poll_ns"],
            cfg["polling.handle_ns"],
            self.nic.config.interrupt_cost,
            self.nic.config.context_switch_cost,
        )
        sqd = cfg["host.send_queue_depth"]
        n_qps = peers * cfg["qps_per_node"]
        shared: list = []
        if isinstance(self.strategy, SharedCq):
            m = min(self.strategy.m, n_qps)
            per_cq = -(-n_qps // m)
            shared = [self.session.add_cq("shared", sqd * per_cq) for _ in range(m)]
        i = 0
        for node in range(peers):
            for _ in range(cfg["qps_per_node"]):
                cq = shared[i % len(shared)] if shared else self.session.add_cq("per-qp", sqd)
                self.session.add_qp(node, cq)
                i += 1
        self.pollers: list[Poller] = []
        for cq in self.session.cqs:
            p = Poller(sim, cq, self.strategy, self.cpu, self.session.dispatch, costs, f"poller{cq.cq_id}")
            self.nic.wire_cq(cq, p.on_interrupt, p.on_arrival)
            self.pollers.append(p)

        n_actors = cfg["actors"]
        shares: list[list[TraceRecord]] = [[] for _ in range(n_actors)]
        for rec in self.trace:
            shares[rec.actor % n_actors].append(rec)
        self.actors = [Actor(self, a, recs) for a, recs in enumerate(shares)]
        self.batcher.on_request_done = self._request_done
        self._req_ids = 0
        self._done = bytearray(len(self.trace))
        self.last_completion = 0
        self.bytes_completed = 0
        self.finished = False

    def next_req_id(self) -> int:
        rid = self._req_ids
        self._req_ids += 1
        return rid

    def _request_done(self, r: DataRequest) -> None:
        if self._done[r.req_id]:
            raise SimulationError(f"request {r.req_id} completed twice")
        self._done[r.req_id] = 1
        self.last_completion = self.sim.now
        self.bytes_completed += r.length
        self.actors[r.origin_actor].notify()

    # -- running ------------------------------------------------------------
    def run(self) -> "Scenario":
        if self.finished:
            raise SimulationError("scenario already ran")
        for p in self.pollers:
            p.start()
        closed = self.cfg["replay.mode"] == "closed"
        for a in self.actors:
            if a.records:
                self.sim.process(a.run_closed() if closed else a.run_open(), f"actor{a.actor_id}")
        duration = self.cfg["duration"]
        self.summary = self.sim.run_until(duration) if duration else self.sim.run()
        for p in self.pollers:
            p.finish()
        self.finished = True
        if not duration:
            self.check_conservation()
        return self

    def check_conservation(self) -> None:
        m = self.sim.metrics
        c = m.counters
        n = len(self.trace)
        problems = []
        if c["requests_in"] != n or c["requests_completed"] != n:
            problems.append(f"requests_in={c['requests_in']} requests_completed={c['requests_completed']} trace={n}")
        for g in ("in_flight_bytes", "in_flight_ops", "merge_queue_depth"):
            if m.gauges[g].value:
                problems.append(f"{g}={m.gauges[g].value}")
        if n and min(self._done) == 0:
            problems.append("some requests were never completed")
        if problems:
            raise SimulationError("not conserved at quiescence: " + "; ".join(problems))

    # -- reporting ----------------------------------------------------------
    @property
    def makespan(self) -> int:
        return self.cfg["duration"] or self.last_completion

    @property
    def iops(self) -> float:
        span = self.makespan
        return self.sim.metrics.counters["requests_completed"] * 1e9 / span if span else 0.0

    @property
    def bandwidth(self) -> float:
        span = self.makespan
        return self.bytes_completed * 1e9 / span if span else 0.0

    def report(self) -> dict[str, Any]:
        if not self.finished:
            raise SimulationError("run the scenario before reporting")
        m = self.sim.metrics
        span = self.makespan
        interval = self.cfg["report.sample_interval_ns"]
        gauges = {}
        for name, g in sorted(m.gauges.items()):
            series = g.sample(interval, span)
            gauges[name] = {
                "final": g.value,
                "peak": g.peak,
                "mean": _r(g.time_mean(0, span)),
                "series_variance": _r(_variance(series)),
                "series": series,
            }
        entries = [n for p in self.pollers for n in p.entries]
        busy = sum(p.cpu_busy_time for p in self.pollers)
        cpus = self.cfg["host.cpus"]
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.cfg,
            "requests": len(self.trace),
            "makespan_ns": span,
            "iops": _r(self.iops),
            "bandwidth_bytes_per_s": _r(self.bandwidth),
            "counters": dict(sorted(m.counters.items())),
            "gauges": gauges,
            "histograms": {name: h.summary() for name, h in sorted(m.histograms.items())},
            "cpu": {
                "pollers": len(self.pollers),
                "poller_busy_ns": busy,
                "poller_utilization": _r(busy / (span * cpus)) if span and cpus else None,
            },
            "polling": {
                "strategy": self.strategy.name,
                "entries": len(entries),
                "wc_per_entry_mean": _r(sum(entries) / len(entries)) if entries else 0.0,
            },
            "regulator": {
                "window_bytes": self.regulator.window_bytes,
                "peak_in_flight": self.regulator.peak_in_flight,
                "violations": self.regulator.violations,
            },
            "nic": {"charged_ns": self.nic.charged_total, "busy_fraction": _r(self.nic.charged_total / span) if span else 0.0},
        }


def _r(x: float) -> float:
    return round(float(x), 6)


def _variance(xs: Sequence[float]) -> float:
    if not xs:
        return 0.0
    mean = math.fsum(xs) / len(xs)
    return math.fsum((x - mean) ** 2 for x in xs) / len(xs)


def run(cfg: Mapping[str, Any], trace: Sequence[TraceRecord] | None = None) -> Scenario:
    """Resolve (if needed), build and run a scenario."""
    resolved = cfgmod.resolve(cfg)
    return Scenario(resolved, trace).run()


def report_json(report: Mapping[str, Any]) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def summary_line(report: Mapping[str, Any]) -> str:
    c = report["counters"]
    lat = report["histograms"]["request_latency"]
    return (
        f"requests={report['requests']} iops={report['iops']:.0f} "
        f"bw={report['bandwidth_bytes_per_s'] / 2**20:.1f}MiB/s lat_mean={lat['mean']:.0f}ns "
        f"p99={lat['p99']}ns wqe={c['wqe_posted']} mmio={c['mmio_count']} merges={c['merges']} "
        f"interrupts={c['interrupts']}"
    )
