"""Merge queue and the merge-and-chain engine.

Every request goes through one queue per direction.  The actor that
enqueued it then tries to take the queue's consumer token; whoever holds
the token drains the queue in rounds of at most ``max_chaining_size``
requests, merging address-contiguous runs into one WR and chaining the
WRs bound for the same node behind a single doorbell.  Actors that lose
the token race return at once: their request rides in the holder's batch.
"""

from __future__ import annotations

import itertools
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Callable, Generator, Iterable

from .admission import TrafficRegulator, pacer_blocking
from .kernel import Signal, SimulationError, Simulator
from .verbs import (
    DataRequest,
    Direction,
    MrKind,
    Opcode,
    ScatterGatherEntry,
    Session,
    Space,
    WorkCompletion,
    WorkRequest,
)

if TYPE_CHECKING:
    from .polling import CpuModel

KiB = 1024
MiB = 1024 * KiB
USER_THRESHOLD = 928 * KiB


class Adjacency(str, Enum):
    ADJACENT = "adjacent"
    CHAINABLE = "chainable"
    UNRELATED = "unrelated"


def merge_check(a: DataRequest, b: DataRequest) -> Adjacency:
    if a.node != b.node:
        return Adjacency.UNRELATED
    if a.remote_addr + a.length == b.remote_addr:
        return Adjacency.ADJACENT
    return Adjacency.CHAINABLE


class BatchMode(str, Enum):
    SINGLE = "single"
    MERGE = "merge"
    DOORBELL = "doorbell"
    HYBRID = "hybrid"


class MrStrategy(str, Enum):
    FORCE_PRE = "force_pre"
    FORCE_DYN = "force_dyn"
    AUTO = "auto"


@dataclass
class BatchPolicy:
    mode: BatchMode = BatchMode.HYBRID
    max_chaining_size: int = 16
    mr_strategy: MrStrategy = MrStrategy.AUTO
    auto_threshold: int = USER_THRESHOLD
    max_merged_bytes: int = 1 * MiB
    # CPU time spent inside the critical section
    merge_check_ns: int = 100
    wr_build_ns: int = 200

    def __post_init__(self) -> None:
        self.mode = BatchMode(self.mode)
        self.mr_strategy = MrStrategy(self.mr_strategy)

    def validate(self) -> None:
        if self.max_chaining_size < 1:
            raise ValueError("max_chaining_size must be >= 1")
        if self.max_merged_bytes < 1:
            raise ValueError("max_merged_bytes must be >= 1")
        if self.auto_threshold < 1:
            raise ValueError("auto_threshold must be >= 1")
        if self.merge_check_ns < 0 or self.wr_build_ns < 0:
            raise ValueError("batching CPU costs must be >= 0")

    @property
    def merging(self) -> bool:
        return self.mode in (BatchMode.MERGE, BatchMode.HYBRID)

    @property
    def chaining(self) -> bool:
        return self.mode in (BatchMode.DOORBELL, BatchMode.HYBRID)

    def mr_kind(self, space: Space, total: int) -> MrKind:
        if self.mr_strategy is MrStrategy.FORCE_PRE:
            return MrKind.PRE
        if self.mr_strategy is MrStrategy.FORCE_DYN:
            return MrKind.DYN
        if Space(space) is Space.KERNEL:
            return MrKind.DYN
        return MrKind.PRE if total < self.auto_threshold else MrKind.DYN


class MergeQueue:
    """FIFO of requests plus the consumer token.

    ``put``/``get`` and the token are safe for concurrent threads; inside a
    simulation the event loop serialises callers anyway.
    """

    def __init__(self, direction: Direction, capacity: int = 0, on_depth: Callable[[int], None] | None = None):
        if capacity < 0:
            raise ValueError("capacity must be >= 0 (0 = unbounded)")
        self.direction = Direction(direction)
        self.capacity = capacity
        self.entries: deque[DataRequest] = deque()
        self._lock = threading.Lock()
        self._token = threading.Lock()
        self._on_depth = on_depth
        self._space: list[Signal] = []

    def __len__(self) -> int:
        return len(self.entries)

    def put(self, r: DataRequest) -> bool:
        if r.direction != self.direction:
            raise ValueError(f"{r.direction.value} request on the {self.direction.value} queue")
        with self._lock:
            if self.capacity and len(self.entries) >= self.capacity:
                return False
            self.entries.append(r)
            depth = len(self.entries)
        if self._on_depth is not None:
            self._on_depth(depth)
        return True

    def peek(self) -> DataRequest | None:
        with self._lock:
            return self.entries[0] if self.entries else None

    def get(self) -> DataRequest | None:
        with self._lock:
            if not self.entries:
                return None
            r = self.entries.popleft()
            depth = len(self.entries)
            waiters, self._space = self._space, []
        if self._on_depth is not None:
            self._on_depth(depth)
        for s in waiters:
            s.fire()
        return r

    def head_run(self, policy: BatchPolicy) -> list[DataRequest]:
        """The adjacent run at the front of the queue, as ``plan_runs`` would merge it."""
        with self._lock:
            if not self.entries:
                return []
            run = [self.entries[0]]
            if not policy.merging:
                return run
            total = run[0].length
            for r in itertools.islice(self.entries, 1, policy.max_chaining_size):
                if merge_check(run[-1], r) is not Adjacency.ADJACENT or total + r.length > policy.max_merged_bytes:
                    break
                run.append(r)
                total += r.length
            return run

    def wait_space(self, sim: Simulator) -> Signal:
        sig = Signal(sim)
        self._space.append(sig)
        return sig

    def try_acquire_token(self) -> bool:
        return self._token.acquire(blocking=False)

    def release_token(self) -> None:
        self._token.release()

    @property
    def token_held(self) -> bool:
        return self._token.locked()


def plan_runs(requests: Iterable[DataRequest], policy: BatchPolicy) -> list[list[DataRequest]]:
    """Greedy in-order merge: a request joins the last run of its node if it
    starts exactly where that run ends and the run stays under the size cap."""
    runs: list[list[DataRequest]] = []
    tails: dict[int, tuple[list[DataRequest], int]] = {}
    for r in requests:
        open_run = tails.get(r.node) if policy.merging else None
        if open_run is not None:
            run, total = open_run
            if merge_check(run[-1], r) is Adjacency.ADJACENT and total + r.length <= policy.max_merged_bytes:
                run.append(r)
                tails[r.node] = (run, total + r.length)
                continue
        run = [r]
        runs.append(run)
        tails[r.node] = (run, r.length)
    return runs


def plan_doorbells(runs: list[list[DataRequest]], policy: BatchPolicy) -> list[list[list[DataRequest]]]:
    """Group runs into doorbells: one chain per node when chaining, else one each."""
    if not policy.chaining:
        return [[run] for run in runs]
    by_node: dict[int, list[list[list[DataRequest]]]] = {}
    order: list[list[list[DataRequest]]] = []
    for run in runs:
        node = run[0].node
        chains = by_node.setdefault(node, [])
        if not chains or len(chains[-1]) >= policy.max_chaining_size:
            chain: list[list[DataRequest]] = []
            chains.append(chain)
            order.append(chain)
        chains[-1].append(run)
    return order


def req_chaining(wrs: list[WorkRequest]) -> WorkRequest | None:
    """Link ``wrs`` through ``chain_next``; returns the head (None if empty)."""
    if not wrs:
        return None
    qp = wrs[0].qp
    for a, b in zip(wrs, wrs[1:]):
        if b.qp is not qp:
            raise SimulationError("cannot chain WRs on different QPs")
        a.chain_next = b
    wrs[-1].chain_next = None
    return wrs[0]


@dataclass
class Batch:
    segments: list[WorkRequest] = field(default_factory=list)
    heads: list[WorkRequest] = field(default_factory=list)
    merges: int = 0
    chains: int = 0

    @property
    def covers(self) -> list[int]:
        return [rid for wr in self.segments for rid in wr.covers]

    def extend(self, other: "Batch") -> None:
        self.segments += other.segments
        self.heads += other.heads
        self.merges += other.merges
        self.chains += other.chains


class Batcher:
    """Simulated merge-and-chain front end over a :class:`Session`."""

    def __init__(
        self,
        sim: Simulator,
        session: Session,
        policy: BatchPolicy | None = None,
        regulator: TrafficRegulator | None = None,
        cpu: "CpuModel | None" = None,
        queue_capacity: int = 0,
    ):
        from .polling import CpuModel

        self.sim = sim
        self.session = session
        self.policy = policy or BatchPolicy()
        self.policy.validate()
        self.regulator = regulator or TrafficRegulator(0)
        self.cpu = cpu or CpuModel(0)
        depth = sim.metrics.gauges["merge_queue_depth"]
        self._depths = {d: 0 for d in Direction}

        def tracker(direction: Direction) -> Callable[[int], None]:
            def update(n: int) -> None:
                self._depths[direction] = n
                depth.set(sum(self._depths.values()))

            return update

        self.queues = {d: MergeQueue(d, queue_capacity, tracker(d)) for d in Direction}
        self.batches: list[Batch] = []
        # called with each DataRequest once its completion has been handled
        self.on_request_done: Callable[[DataRequest], None] | None = None

    # -- front end --------------------------------------------------------
    def req_msg(self, r: DataRequest) -> Generator[Any, Any, Batch | None]:
        q = self.queues[r.direction]
        while not q.put(r):
            yield q.wait_space(self.sim)
        self.sim.metrics.inc("requests_in")
        return (yield from self.merge_and_chain(q))

    def merge_and_chain(self, q: MergeQueue) -> Generator[Any, Any, Batch | None]:
        if not q.try_acquire_token():
            return None
        total = Batch()
        try:
            while len(q):
                total.extend((yield from self._round(q)))
        finally:
            q.release_token()
        if not total.segments:
            return None
        self.batches.append(total)
        return total

    def critical_section_ns(self, length: int) -> int:
        """CPU time to take one lone request through the token holder."""
        p = self.policy
        space = self.session.config.space
        return p.merge_check_ns + p.wr_build_ns + self.session.nic.mr_cost(space, p.mr_kind(space, length), length)

    # -- one round --------------------------------------------------------
    def _round(self, q: MergeQueue) -> Generator[Any, Any, Batch]:
        p = self.policy
        reg = self.regulator
        # admit the whole adjacent run at the head together, so pacing never
        # splits what would have been one merged WR
        window = reg.window_bytes if reg.enabled else 0
        run = q.head_run(p)
        need = sum(reg.round(r.length) for r in run)
        while window and len(run) > 1 and need > window:
            need -= reg.round(run.pop().length)
        yield from pacer_blocking(self.sim, reg, need)
        taken = [q.get() for _ in run]
        while len(taken) < p.max_chaining_size:
            nxt = q.peek()
            if nxt is None or not reg.try_charge(nxt.length):
                break
            taken.append(q.get())
        yield from self.cpu.work(p.merge_check_ns * len(taken))

        batch = Batch()
        for doorbell in plan_doorbells(plan_runs(taken, p), p):  # type: ignore[arg-type]
            qp = self.session.next_qp(doorbell[0][0].node)
            wrs = []
            for run in doorbell:
                wr = yield from self._build(qp, run)
                wrs.append(wr)
                batch.merges += len(run) - 1
            head_wr = req_chaining(wrs)
            assert head_wr is not None
            batch.chains += len(wrs) - 1
            batch.segments += wrs
            batch.heads.append(head_wr)
            yield from self.session.post_send(qp, head_wr)
        counters = self.sim.metrics.counters
        counters["merges"] += batch.merges
        counters["chains"] += batch.chains
        return batch

    def _build(self, qp, run: list[DataRequest]) -> Generator[Any, Any, WorkRequest]:
        """Make ``run`` NIC-accessible (copy or register) and wrap it in one WR."""
        session = self.session
        space = session.config.space
        total = sum(r.length for r in run)
        kind = self.policy.mr_kind(space, total)
        pool_slots = None
        if kind is MrKind.PRE:
            pool = session.mempool
            count = pool.slots_for(total)
            start = yield from pool.acquire(self.sim, count)
            pool_slots = (start, count)
            sges = [ScatterGatherEntry(pool.slot_addr(start), total, pool.region)]
            cost = session.nic.mr_cost(space, MrKind.PRE, total)
        else:
            sges = []
            cost = 0
            for r in run:
                mr = session.register_mr(space, r.length, MrKind.DYN)
                sges.append(ScatterGatherEntry(mr.base, r.length, mr))
                cost += mr.cost_ns
        yield from self.cpu.work(cost + self.policy.wr_build_ns)
        opcode = Opcode.RDMA_WRITE if run[0].direction is Direction.WRITE else Opcode.RDMA_READ
        return WorkRequest(session.new_wr_id(), qp, opcode, sges, run[0].remote_addr, list(run), pool_slots=pool_slots)

    # -- completion side --------------------------------------------------
    def on_completion(self, wc: WorkCompletion) -> None:
        """Session handler: free resources and retire the covered requests."""
        wr = wc.wr
        if wr is None:
            raise SimulationError(f"completion {wc.wr_id} lost its WR")
        session = self.session
        if wr.pool_slots is not None:
            session.mempool.release(*wr.pool_slots)
        for sge in wr.sge_list:
            if sge.mr.kind is MrKind.DYN:
                session.deregister_mr(sge.mr)
        m = self.sim.metrics
        now = self.sim.now
        for r in wr.requests:
            latency = now - r.arrive_at
            self.regulator.on_completion(self.regulator.round(r.length), latency)
            m.histograms["request_latency"].record(latency)
            m.inc("requests_completed")
            if self.on_request_done is not None:
                self.on_request_done(r)


# -- concurrent stress mode ----------------------------------------------


@dataclass
class StressResult:
    operations: int
    threads: int
    delivered: int
    lost: list[int]
    duplicated: list[int]
    violations: int
    peak_in_flight: int
    window_bytes: int
    merges: int
    elapsed_s: float

    @property
    def ok(self) -> bool:
        return not self.lost and not self.duplicated and self.violations == 0 and self.delivered == self.operations


def stress(
    threads: int = 8,
    operations: int = 1_000_000,
    window_bytes: int = 8 * 128 * KiB,
    policy: BatchPolicy | None = None,
    seed: int = 0,
    nodes: int = 4,
    block: int = 128 * KiB,
) -> StressResult:
    """Drive one MergeQueue and one TrafficRegulator from real threads.

    Producers enqueue and race for the token exactly as simulated actors
    do; the token holder charges the regulator, plans merged/chained WRs
    and hands them to a completer thread that frees the window.  Every
    request id must come back exactly once and the window must hold.
    """
    policy = policy or BatchPolicy()
    q = MergeQueue(Direction.WRITE)
    reg = TrafficRegulator(window_bytes, fragment_bytes=block)
    done: "deque[list[DataRequest]]" = deque()
    done_ready = threading.Semaphore(0)
    seen = bytearray(operations)
    dup: list[int] = []
    merges = [0]
    delivered = [0]
    stop = object()

    def drain() -> None:
        while True:
            while True:
                head = q.peek()
                if head is None:
                    break
                reg.wait_blocking(head.length)
                taken = [q.get()]
                while len(taken) < policy.max_chaining_size:
                    nxt = q.peek()
                    if nxt is None or not reg.try_charge(nxt.length):
                        break
                    taken.append(q.get())
                for doorbell in plan_doorbells(plan_runs(taken, policy), policy):  # type: ignore[arg-type]
                    for run in doorbell:
                        merges[0] += len(run) - 1
                        done.append(run)
                        done_ready.release()
            q.release_token()
            # a producer may have enqueued after our last look but before
            # the release; it lost the token race, so we must look again
            if not len(q) or not q.try_acquire_token():
                return

    def completer() -> None:
        while True:
            done_ready.acquire()
            run = done.popleft()
            if run is stop:
                return
            for r in run:
                if seen[r.req_id]:
                    dup.append(r.req_id)
                seen[r.req_id] = 1
                delivered[0] += 1
                reg.on_completion(reg.round(r.length))

    per_thread = [operations // threads + (1 if i < operations % threads else 0) for i in range(threads)]
    starts = [sum(per_thread[:i]) for i in range(threads)]

    def producer(idx: int) -> None:
        rng = random.Random(seed * 1_000_003 + idx)
        addr = {n: idx * (1 << 36) for n in range(nodes)}
        for k in range(per_thread[idx]):
            rid = starts[idx] + k
            node = rng.randrange(nodes)
            if rng.random() >= 0.5:
                addr[node] += block * rng.randrange(2, 64)
            r = DataRequest(rid, Direction.WRITE, node, addr[node], block)
            addr[node] += block
            while not q.put(r):
                time.sleep(0)
            if q.try_acquire_token():
                drain()

    t0 = time.perf_counter()
    comp = threading.Thread(target=completer, name="completer")
    comp.start()
    workers = [threading.Thread(target=producer, args=(i,), name=f"producer{i}") for i in range(threads)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    if len(q):
        raise SimulationError("requests left in the merge queue after all producers finished")
    done.append(stop)  # type: ignore[arg-type]
    done_ready.release()
    comp.join()
    elapsed = time.perf_counter() - t0
    lost = [i for i in range(operations) if not seen[i]]
    return StressResult(
        operations,
        threads,
        delivered[0],
        lost,
        dup,
        reg.violations,
        reg.peak_in_flight,
        window_bytes,
        merges[0],
        elapsed,
    )
