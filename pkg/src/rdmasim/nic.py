"""Simulated RDMA NIC.

One serial processing engine with three finite SRAM caches (WQE, QP
context, MPT).  Posting a chain of N work requests costs one MMIO for the
head and N-1 DMA reads for the rest.  A WQE that was pushed out of the
cache before the engine reached it must be fetched again over PCIe, which
is what makes an overloaded NIC slower than a busy one.
"""

from __future__ import annotations

import itertools
import math
from collections import OrderedDict, deque
from dataclasses import dataclass, fields
from typing import Any, Hashable

from .kernel import COMPLETION, NIC_STEP, SimulationError, Simulator
from .verbs import (
    PAGE,
    CompletionQueue,
    MemoryRegion,
    MrKind,
    Space,
    WcStatus,
    WorkCompletion,
    WorkRequest,
)

KiB = 1024
MiB = 1024 * KiB


@dataclass
class NicConfig:
    wqe_cache_slots: int = 256
    qp_cache_slots: int = 64
    mpt_cache_slots: int = 1024
    mmio_cost: int = 600
    dma_read_cost: int = 300
    cache_miss_refetch_cost: int = 500
    per_wqe_process_cost: int = 250
    # 128 KiB on the wire in ~23 us (56 Gb/s class link)
    per_byte_wire_cost: float = 23000 / (128 * KiB)
    interrupt_cost: int = 2000
    context_switch_cost: int = 3000

    COST_FIELDS = (
        "mmio_cost",
        "dma_read_cost",
        "cache_miss_refetch_cost",
        "per_wqe_process_cost",
        "per_byte_wire_cost",
        "interrupt_cost",
        "context_switch_cost",
    )

    def validate(self) -> None:
        for name in ("wqe_cache_slots", "qp_cache_slots", "mpt_cache_slots"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in self.COST_FIELDS:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.mmio_cost > self.dma_read_cost:
            raise ValueError("mmio_cost must exceed dma_read_cost")

    def scaled(self, name: str, factor: float) -> "NicConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        value = values[name] * factor
        values[name] = value if isinstance(values[name], float) else max(1, round(value))
        return NicConfig(**values)


@dataclass
class MrCostModel:
    """Cost of making a buffer NIC-accessible.

    ``pre`` copies into a pre-registered slot (memcpy cost); ``dyn``
    registers the buffer itself (fixed cost plus a per-page cost).  Kernel
    registrations use physical addresses and are cheap; user registrations
    pay for address translation and only beat the copy for large buffers.
    """

    kernel_reg_base: int = 100
    kernel_reg_per_page: int = 100
    user_reg_base: int = 48_626
    user_reg_per_page: int = 200
    memcpy_per_byte: float = 0.1

    def cost(self, space: Space | str, kind: MrKind | str, length: int) -> int:
        if length <= 0:
            raise ValueError("length must be positive")
        if MrKind(kind) is MrKind.PRE:
            return math.ceil(self.memcpy_per_byte * length)
        pages = -(-length // PAGE)
        if Space(space) is Space.KERNEL:
            return self.kernel_reg_base + self.kernel_reg_per_page * pages
        return self.user_reg_base + self.user_reg_per_page * pages

    @property
    def user_crossover(self) -> float:
        """Size (bytes) above which user-space registration beats the copy."""
        per_byte = self.memcpy_per_byte - self.user_reg_per_page / PAGE
        if per_byte <= 0:
            return math.inf
        return self.user_reg_base / per_byte

    def validate(self) -> None:
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be > 0")


class LruCache:
    """Fixed-capacity LRU set."""

    def __init__(self, slots: int):
        self.slots = slots
        self._entries: OrderedDict[Hashable, None] = OrderedDict()
        self.evictions = 0

    def __contains__(self, key: Hashable) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def touch(self, key: Hashable) -> bool:
        """Access ``key``; returns True on a hit.  Misses insert it."""
        entries = self._entries
        if key in entries:
            entries.move_to_end(key)
            return True
        entries[key] = None
        if len(entries) > self.slots:
            entries.popitem(last=False)
            self.evictions += 1
        return False

    def discard(self, key: Hashable) -> None:
        self._entries.pop(key, None)


class Nic:
    def __init__(self, sim: Simulator, config: NicConfig | None = None, mr_costs: MrCostModel | None = None):
        self.sim = sim
        self.config = config or NicConfig()
        self.config.validate()
        self.mr_costs = mr_costs or MrCostModel()
        self.wqe_cache = LruCache(self.config.wqe_cache_slots)
        self.qp_cache = LruCache(self.config.qp_cache_slots)
        self.mpt_cache = LruCache(self.config.mpt_cache_slots)
        self._ready: deque[tuple[WorkRequest, int]] = deque()
        self.busy = False
        self.busy_until = 0
        self.inflight: set[int] = set()
        self.charged_total = 0
        # replay material: one entry per doorbell, one per processed WR
        self.post_log: list[dict[str, Any]] = []
        self.process_log: list[dict[str, Any]] = []
        self._log_seq = itertools.count()  # orders entries across both logs
        self.keep_logs = True
        m = sim.metrics
        for name in ("wqe_cache_miss", "qp_cache_miss", "mpt_cache_miss"):
            m.counters.setdefault(name, 0)

    # -- memory registration hooks ---------------------------------------
    def mr_cost(self, space: Space, kind: MrKind, length: int) -> int:
        return self.mr_costs.cost(space, kind, length)

    def on_register(self, mr: MemoryRegion) -> None:
        # user-space dynamic registrations occupy an MPT entry
        if mr.kind is MrKind.DYN and mr.space is Space.USER:
            self.mpt_cache.touch(mr.mr_id)

    def on_deregister(self, mr: MemoryRegion) -> None:
        self.mpt_cache.discard(mr.mr_id)

    def _tracks_mpt(self, mr: MemoryRegion) -> bool:
        return mr.kind is MrKind.PRE or mr.space is Space.USER

    # -- data path ---------------------------------------------------------
    def accept_post(self, chain: list[WorkRequest]) -> None:
        if not chain:
            raise SimulationError("empty chain posted")
        qp = chain[0].qp
        cfg = self.config
        m = self.sim.metrics
        now = self.sim.now
        counters = m.counters
        misses: list[tuple[int, int]] = []
        for i, wr in enumerate(chain):
            if wr.qp is not qp:
                raise SimulationError("chain spans more than one QP")
            cost = cfg.mmio_cost if i == 0 else cfg.dma_read_cost
            qp_miss = 0
            mpt_miss = 0
            if not self.qp_cache.touch(qp.qp_id):
                cost += cfg.cache_miss_refetch_cost
                qp_miss = 1
            for sge in wr.sge_list:
                if self._tracks_mpt(sge.mr) and not self.mpt_cache.touch(sge.mr.mr_id):
                    cost += cfg.cache_miss_refetch_cost
                    mpt_miss += 1
            counters["qp_cache_miss"] += qp_miss
            counters["mpt_cache_miss"] += mpt_miss
            self.wqe_cache.touch(wr.wr_id)
            wr.posted_at = now
            self.inflight.add(wr.wr_id)
            self._ready.append((wr, cost))
            if self.keep_logs:
                misses.append((qp_miss, mpt_miss))
        counters["mmio_count"] += 1
        counters["dma_read_count"] += len(chain) - 1
        counters["wqe_posted"] += len(chain)
        m.gauges["in_flight_ops"].add(len(chain))
        if self.keep_logs:
            self.post_log.append(
                {"seq": next(self._log_seq), "t": now, "qp": qp.qp_id, "wrs": [wr.wr_id for wr in chain], "misses": misses}
            )
        if not self.busy:
            self.busy = True
            self.sim.call_at(now, NIC_STEP, self.process_step)

    def wr_cost(self, wr: WorkRequest, post_cost: int, wqe_hit: bool) -> int:
        cfg = self.config
        cost = post_cost + cfg.per_wqe_process_cost + math.ceil(wr.length * cfg.per_byte_wire_cost)
        if not wqe_hit:
            cost += cfg.cache_miss_refetch_cost
        return cost

    def process_step(self) -> None:
        """Start the oldest ready WR; its completion schedules the next step."""
        if not self._ready:
            self.busy = False
            return
        wr, post_cost = self._ready.popleft()
        hit = wr.wr_id in self.wqe_cache
        if not hit:
            self.sim.metrics.counters["wqe_cache_miss"] += 1
        self.wqe_cache.discard(wr.wr_id)
        cost = self.wr_cost(wr, post_cost, hit)
        self.charged_total += cost
        if self.keep_logs:
            self.process_log.append(
                {"seq": next(self._log_seq), "wr": wr.wr_id, "start": self.sim.now, "cost": cost, "wqe_hit": hit, "post_cost": post_cost,
                 "bytes": wr.length}
            )
        self.busy_until = self.sim.now + cost
        self.sim.call_at(self.busy_until, COMPLETION, self._finish, wr)

    def _finish(self, wr: WorkRequest) -> None:
        now = self.sim.now
        wc = WorkCompletion(wr.wr_id, WcStatus.SUCCESS, now, wr.covers, wr)
        self.inflight.discard(wr.wr_id)
        m = self.sim.metrics
        m.gauges["in_flight_ops"].add(-1)
        m.histograms["io_completion_time"].record(now - wr.posted_at)
        self.deliver_completion(wr.qp.cq, wc)
        self.process_step()

    def deliver_completion(self, cq: CompletionQueue, wc: WorkCompletion) -> None:
        cq.push(wc)
        if cq.notify_armed:
            self.raise_interrupt(cq)
        elif cq.on_arrival is not None:
            cq.on_arrival(cq)

    def raise_interrupt(self, cq: CompletionQueue) -> None:
        if cq.raise_interrupt is None:
            raise SimulationError(f"CQ {cq.cq_id} armed but not wired to a poller")
        cq.raise_interrupt(cq)

    def wire_cq(self, cq: CompletionQueue, on_interrupt, on_arrival=None) -> None:
        """Connect a CQ to its poller.

        An interrupt counts one interrupt and one context switch, disarms
        the CQ, then enters the poller.
        """

        def fire(c: CompletionQueue) -> None:
            counters = self.sim.metrics.counters
            counters["interrupts"] += 1
            counters["context_switches"] += 1
            c.notify_armed = False
            on_interrupt(c)

        cq.raise_interrupt = fire
        cq.on_arrival = on_arrival
