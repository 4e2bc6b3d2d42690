"""One test per acceptance criterion.

Each test prints a one-line verdict with the measured numbers; the
conftest summary repeats PASS/FAIL per criterion at the end of the run.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import pytest

from rdmasim import config as cfgmod
from rdmasim.batching import stress
from rdmasim.harness import calibrate_window, summary_table, sweep
from rdmasim.nic import MrCostModel, NicConfig
from rdmasim.presets import PRESETS, preset
from rdmasim.scenario import Scenario, make_trace, report_json
from rdmasim.verbs import Direction, MrKind, Space
from rdmasim.workload import TraceRecord, load_trace, save_trace

KiB = 1024
MiB = 1024 * KiB


def verdict(n: int, ok: bool, detail: str) -> None:
    print(f"criterion {n}: {'pass' if ok else 'FAIL'}  {detail}")


def run_with_covers(cfg, trace=None):
    sc = Scenario(cfg, trace)
    covers: list[int] = []
    sc.session.register_handler(lambda wc: covers.extend(wc.covers))
    sc.run()
    return sc, covers


# 1 ---------------------------------------------------------------------
def test_c01_conservation_every_preset(large_cluster):
    bad = []
    for name in sorted(PRESETS):
        cfg = preset(name, **({"workload.large_cluster": large_cluster} if name == "fig2" else {}))
        sc, covers = run_with_covers(cfg)
        c = sc.sim.metrics.counters
        n = len(sc.trace)
        if not (c["requests_in"] == c["requests_completed"] == n):
            bad.append(f"{name}: in={c['requests_in']} done={c['requests_completed']} n={n}")
        if sc.sim.metrics.gauges["in_flight_bytes"].value != 0:
            bad.append(f"{name}: in_flight_bytes={sc.sim.metrics.gauges['in_flight_bytes'].value}")
        if sorted(covers) != list(range(n)):
            bad.append(f"{name}: completion coverage is not exactly-once")
    verdict(1, not bad, "; ".join(bad) or f"{len(PRESETS)} presets conserved")
    assert not bad


# 2 ---------------------------------------------------------------------
def test_c02_table1_wqe_ordering():
    cfg = preset("table1")
    assert cfg["workload.requests"] >= 100_000
    wqe = {}
    for mode in ("single", "merge", "doorbell", "hybrid"):
        sc = Scenario(cfgmod.resolve({**cfg, "batching.mode": mode}))
        sc.nic.keep_logs = False
        sc.run()
        wqe[mode] = sc.sim.metrics.counters["wqe_posted"]
    reduction = 1 - wqe["merge"] / wqe["single"]
    ok = (
        wqe["merge"] < wqe["single"]
        and wqe["doorbell"] == wqe["single"]
        and wqe["hybrid"] == wqe["merge"]
        and reduction >= 0.05
    )
    verdict(2, ok, f"wqe_posted={wqe} merge reduction={reduction:.3f}")
    assert ok


# 3 ---------------------------------------------------------------------
def replay_oracle(nic_cfg: NicConfig, post_log, process_log):
    """Recompute doorbell counts and the NIC's charged time from the logs."""
    mmio = len(post_log)
    dma = sum(len(p["wrs"]) - 1 for p in post_log)
    events = sorted([(p["seq"], "post", p) for p in post_log] + [(e["seq"], "proc", e) for e in process_log])
    cache: OrderedDict[int, None] = OrderedDict()
    post_cost: dict[int, int] = {}
    total = 0
    processed = set()
    for _, kind, e in events:
        if kind == "post":
            for i, wr in enumerate(e["wrs"]):
                qp_miss, mpt_miss = e["misses"][i]
                base = nic_cfg.mmio_cost if i == 0 else nic_cfg.dma_read_cost
                post_cost[wr] = base + (qp_miss + mpt_miss) * nic_cfg.cache_miss_refetch_cost
                cache[wr] = None
                if len(cache) > nic_cfg.wqe_cache_slots:
                    cache.popitem(last=False)
        else:
            wr = e["wr"]
            assert wr not in processed
            processed.add(wr)
            hit = wr in cache
            cache.pop(wr, None)
            assert hit == e["wqe_hit"]
            cost = (
                post_cost[wr]
                + nic_cfg.per_wqe_process_cost
                + math.ceil(e["bytes"] * nic_cfg.per_byte_wire_cost)
                + (0 if hit else nic_cfg.cache_miss_refetch_cost)
            )
            total += cost
    assert processed == set(post_cost)
    return mmio, dma, total


def test_c03_doorbell_ledger_replay_oracle():
    cases = {
        "fig7-hybrid-6actors": preset("fig7", actors=6),
        "table1-doorbell-small": preset("table1", **{"batching.mode": "doorbell", "workload.requests": 5000}),
        "fig5-hybrid-user": preset("fig5", space="user", **{"workload.requests": 4000}),
        "fig1-single-12actors": preset("fig1", actors=12, **{"workload.requests": 2400}),
    }
    bad = []
    for name, cfg in cases.items():
        sc = Scenario(cfg).run()
        c = sc.sim.metrics.counters
        mmio, dma, charged = replay_oracle(sc.nic.config, sc.nic.post_log, sc.nic.process_log)
        if (c["mmio_count"], c["dma_read_count"], sc.nic.charged_total) != (mmio, dma, charged):
            bad.append(f"{name}: counters=({c['mmio_count']},{c['dma_read_count']},{sc.nic.charged_total}) "
                       f"oracle=({mmio},{dma},{charged})")
    verdict(3, not bad, "; ".join(bad) or f"{len(cases)} traces match the replay oracle")
    assert not bad


# 4 ---------------------------------------------------------------------
def fig1_shape(cfg) -> tuple[bool, str]:
    rows = summary_table(sweep(cfg, "actors", list(range(1, 13))), "actors")
    iops = [r["iops"] for r in rows]
    best = max(range(len(iops)), key=lambda i: (iops[i], -i))
    interior = 0 < best < len(iops) - 1
    tail = rows[best:]
    ops = [r["in_flight_ops_mean"] for r in tail]
    ioc = [r["io_completion_mean"] for r in tail]
    mono = all(b >= a for a, b in zip(ops, ops[1:])) and all(b >= a for a, b in zip(ioc, ioc[1:]))
    return interior and mono, f"peak@{best + 1} interior={interior} monotone={mono}"


def perturbed_fig1(field: str, factor: float) -> dict:
    base = preset("fig1")
    v = base[f"nic.{field}"] * factor
    if field != "per_byte_wire_cost":
        v = round(v)
    # keep a head MMIO dearer than a chained DMA read
    if field == "mmio_cost":
        v = max(v, base["nic.dma_read_cost"] + 1)
    if field == "dma_read_cost":
        v = min(v, base["nic.mmio_cost"] - 1)
    return preset("fig1", **{f"nic.{field}": v})


def test_c04_fig1_shape_and_robustness():
    results = {"base": fig1_shape(preset("fig1"))}
    for field in NicConfig.COST_FIELDS:
        for factor in (0.5, 2.0):
            results[f"{field}x{factor}"] = fig1_shape(perturbed_fig1(field, factor))
    failed = {k: v[1] for k, v in results.items() if not v[0]}
    verdict(4, not failed, f"{len(results)} sweeps; base {results['base'][1]}; failed={failed}")
    assert not failed


# 5 ---------------------------------------------------------------------
def test_c05_fig7_admission():
    base = preset("fig7")
    cal = calibrate_window(base)
    unreg = cal.rows
    reg = summary_table(sweep({**base, "admission.window_bytes": cal.window_bytes}, "actors", list(range(1, 13))), "actors")
    peak_u = max(r["iops"] for r in unreg)
    peak_r = max(r["iops"] for r in reg)
    ratio = peak_r / peak_u
    # past the unregulated peak the NIC is overloaded; that is where the
    # window has to calm the in-flight series
    past = [i for i, r in enumerate(unreg) if r["value"] >= cal.peak_actors]
    calmer = all(reg[i]["in_flight_bytes_variance"] < unreg[i]["in_flight_bytes_variance"] for i in past)
    ok = cal.interior_peak and ratio >= 1.10 and calmer
    verdict(
        5,
        ok,
        f"window={cal.window_bytes} unregulated peak@{cal.peak_actors} ratio={ratio:.3f} "
        f"variance lower at actors>={cal.peak_actors}: {calmer}",
    )
    assert ok


# 6 ---------------------------------------------------------------------
def test_c06_fig2_polling_orderings(large_cluster):
    medium = preset("fig2", **{"workload.large_cluster": large_cluster})
    reps = {r["polling"]["strategy"]: r for r in sweep(medium, "polling.strategy", ["adaptive", "hybrid", "event_batch"])}
    a, h, e = (reps[k] for k in ("adaptive", "hybrid", "event_batch"))

    def c(r, k):
        return r["counters"][k]

    counts_ok = all(c(a, k) < c(h, k) <= c(e, k) for k in ("interrupts", "context_switches"))
    bw = [r["bandwidth_bytes_per_s"] for r in (a, h, e)]
    bw_ok = bw[0] >= bw[1] >= bw[2]
    large = preset("fig2", **{"workload.large_cluster": large_cluster, "workload.preset": "large"})
    lr = {r["polling"]["strategy"]: r["bandwidth_bytes_per_s"] for r in sweep(large, "polling.strategy", ["adaptive", "busy"])}
    gap = abs(lr["adaptive"] - lr["busy"]) / lr["busy"]
    ok = counts_ok and bw_ok and gap <= 0.05
    verdict(
        6,
        ok,
        f"interrupts A/H/EB={c(a, 'interrupts')}/{c(h, 'interrupts')}/{c(e, 'interrupts')} "
        f"bw A/H/EB={[round(x / MiB) for x in bw]}MiB/s large |A-B|/B={gap:.4f}",
    )
    assert ok


# 7 ---------------------------------------------------------------------
def polling_trace(cfg):
    sc = Scenario(cfg).run()
    return sc.sim.metrics.counters["interrupts"], [p.entries for p in sc.pollers], sc


def longest_cq_gap(sc) -> int:
    """Longest stretch with no completion arriving at a CQ, in ns."""
    by_cq: dict[int, list[int]] = {}
    qp_cq = {qp.qp_id: qp.cq.cq_id for qp in sc.session.iter_qps()}
    wr_qp = {wr: p["qp"] for p in sc.nic.post_log for wr in p["wrs"]}
    for e in sc.nic.process_log:
        by_cq.setdefault(qp_cq[wr_qp[e["wr"]]], []).append(e["start"] + e["cost"])
    gaps = [b - a for ts in by_cq.values() for a, b in zip(sorted(ts), sorted(ts)[1:])]
    return max(gaps, default=0)


def test_c07_limit_equivalences(large_cluster):
    b = 16
    mismatched = []
    for seed in range(100):
        cfg = preset("fig2", seed=seed, **{"workload.large_cluster": large_cluster, "workload.requests": 1000})
        ad = polling_trace(cfgmod.resolve({**cfg, "polling.strategy": "adaptive", "polling.max_retry": 0,
                                           "polling.max_poll_wc": b}))
        eb = polling_trace(cfgmod.resolve({**cfg, "polling.strategy": "event_batch", "polling.budget": b}))
        if ad[:2] != eb[:2]:
            mismatched.append(seed)
    part_a = not mismatched

    large = preset("fig2", **{"workload.large_cluster": large_cluster, "workload.preset": "large"})
    _, _, busy = polling_trace(cfgmod.resolve({**large, "polling.strategy": "busy"}))
    poll_ns = large["polling.poll_ns"]
    max_retry = 2 * (longest_cq_gap(busy) // poll_ns) + 1
    interrupts, _, ad = polling_trace(cfgmod.resolve({**large, "polling.strategy": "adaptive", "polling.max_retry": max_retry}))
    premise = longest_cq_gap(ad) < max_retry * poll_ns
    part_b = premise and interrupts <= 1
    verdict(
        7,
        part_a and part_b,
        f"(a) max_retry=0 vs event_batch: {100 - len(mismatched)}/100 seeds identical "
        f"(first mismatch seed={mismatched[:1]}); (b) max_retry={max_retry} interrupts={interrupts}",
    )
    assert part_a and part_b


# 8 ---------------------------------------------------------------------
def test_c08_fig8_scalability():
    peers = (1, 2, 4, 8, 16)
    strategies = ("adaptive", "busy", "event", "shared_cq")
    base = preset("fig8")
    assert base["host.cpus"] == 8
    iops = {}
    for p in peers:
        for s in strategies:
            iops[p, s] = Scenario(cfgmod.resolve({**base, "peers": p, "polling.strategy": s, "polling.m": 1})).run().iops
    busy_shape = all(iops[p, "busy"] > iops[p, "event"] for p in peers if p <= 4) and iops[16, "busy"] < iops[16, "event"]
    shared = iops[16, "shared_cq"] < iops[16, "event"]
    behind = [(p, s, round(iops[p, "adaptive"] - iops[p, s], 1)) for p in peers for s in strategies[1:]
              if iops[p, "adaptive"] < iops[p, s]]
    ok = busy_shape and shared and not behind
    table = " | ".join(f"{p}:" + ",".join(f"{iops[p, s] / 1e3:.1f}k" for s in strategies) for p in peers)
    verdict(8, ok, f"busy shape={busy_shape} shared<event@16={shared} adaptive behind at {behind}; A,B,E,S {table}")
    assert ok


# 9 ---------------------------------------------------------------------
def test_c09_mr_cost_crossover():
    m = MrCostModel()
    sizes = range(4 * KiB, 4 * MiB + 1, 4 * KiB)
    below = all(m.cost(Space.USER, MrKind.PRE, s) < m.cost(Space.USER, MrKind.DYN, s) for s in sizes if s < 896 * KiB)
    above = all(m.cost(Space.USER, MrKind.PRE, s) > m.cost(Space.USER, MrKind.DYN, s) for s in sizes if s > 960 * KiB)
    kernel = all(m.cost(Space.KERNEL, MrKind.DYN, s) < m.cost(Space.KERNEL, MrKind.PRE, s) for s in sizes)
    ok = below and above and kernel and 896 * KiB <= m.user_crossover <= 960 * KiB
    verdict(9, ok, f"user crossover={m.user_crossover / KiB:.1f}KiB kernel dyn<pre everywhere={kernel}")
    assert ok


# 10 --------------------------------------------------------------------
def test_c10_load_aware_non_enforcement():
    n, length, actors = 256, 4096, 4
    cfg = cfgmod.resolve({
        "actors": actors,
        "batching.mode": "hybrid",
        "host.cpus": 0,
        "replay.mode": "open",
        "workload.req_len": length,
    })

    def trace(gap: int) -> list[TraceRecord]:
        # each actor owns one contiguous stretch of addresses
        return [TraceRecord(i * gap, Direction.WRITE, 0, i * length, length, i * actors // n) for i in range(n)]

    probe = Scenario(cfg, trace(0))
    gap = 10 * probe.batcher.critical_section_ns(length)
    sparse = Scenario(cfg, trace(gap)).run()
    dense = Scenario(cfg, trace(0)).run()
    cs, cd = sparse.sim.metrics.counters, dense.sim.metrics.counters
    singles = all(len(wr.covers) == 1 and wr.chain_next is None for b in sparse.batcher.batches for wr in b.segments)
    ok = cs["merges"] == 0 and cs["wqe_posted"] == n and cs["mmio_count"] == n and singles and cd["merges"] > 0
    verdict(10, ok, f"gap={gap}ns sparse merges={cs['merges']} wqe={cs['wqe_posted']}; zero-gap merges={cd['merges']}")
    assert ok


# 11 --------------------------------------------------------------------
def test_c11_determinism_and_round_trip(tmp_path, large_cluster):
    cfg = preset("fig5", **{"workload.requests": 3000})
    first = report_json(Scenario(cfg).run().report())
    second = report_json(Scenario(cfg).run().report())
    identical = first == second
    trips = []
    for kind, name in (("kv", "etc"), ("kv", "sys"), ("burst", "small"), ("burst", "medium"), ("burst", "large")):
        c = preset("fig2", **{"workload.kind": kind, "workload.preset": name, "workload.large_cluster": large_cluster})
        t = make_trace(c)
        path = tmp_path / f"{name}.trace"
        save_trace(t, path)
        trips.append(load_trace(path) == t)
    ok = identical and all(trips)
    verdict(11, ok, f"reports identical={identical} round trips={trips}")
    assert ok


# 12 --------------------------------------------------------------------
def test_c12_concurrent_queue_stress():
    r = stress(threads=8, operations=1_000_000)
    ok = r.ok and r.peak_in_flight <= r.window_bytes
    verdict(
        12,
        ok,
        f"threads={r.threads} ops={r.operations} delivered={r.delivered} lost={len(r.lost)} "
        f"dup={len(r.duplicated)} violations={r.violations} peak={r.peak_in_flight}/{r.window_bytes} "
        f"merges={r.merges} {r.elapsed_s:.1f}s",
    )
    assert ok
