"""Verbs-shaped data model: requests, work requests, queue pairs, CQs, sessions."""

from __future__ import annotations

import itertools
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Callable, Generator, Iterator

from .kernel import Signal, SimulationError, Simulator

if TYPE_CHECKING:
    from .nic import Nic

BLOCK = 128 * 1024
PAGE = 4096


class Direction(str, Enum):
    READ = "R"
    WRITE = "W"


class MrKind(str, Enum):
    PRE = "pre"
    DYN = "dyn"


class Space(str, Enum):
    KERNEL = "kernel"
    USER = "user"


class Opcode(str, Enum):
    RDMA_READ = "rdma_read"
    RDMA_WRITE = "rdma_write"


class WcStatus(str, Enum):
    SUCCESS = "success"
    FLUSHED = "flushed"


@dataclass(slots=True)
class DataRequest:
    req_id: int
    direction: Direction
    node: int
    remote_addr: int
    length: int
    arrive_at: int = 0
    origin_actor: int = 0

    def __post_init__(self) -> None:
        if self.length <= 0:
            raise ValueError(f"request {self.req_id}: length must be positive")
        if self.remote_addr < 0:
            raise ValueError(f"request {self.req_id}: negative remote address")

    @property
    def end(self) -> int:
        return self.remote_addr + self.length


@dataclass(slots=True)
class MemoryRegion:
    mr_id: int
    base: int
    length: int
    kind: MrKind
    space: Space
    registered_at: int = 0
    cost_ns: int = 0

    def contains(self, addr: int, length: int) -> bool:
        return self.base <= addr and addr + length <= self.base + self.length


@dataclass(slots=True)
class ScatterGatherEntry:
    local_addr: int
    length: int
    mr: MemoryRegion

    def __post_init__(self) -> None:
        if not self.mr.contains(self.local_addr, self.length):
            raise ValueError("SGE lies outside its memory region")


@dataclass(slots=True, eq=False)
class WorkRequest:
    wr_id: int
    qp: "QueuePair"
    opcode: Opcode
    sge_list: list[ScatterGatherEntry]
    remote_addr: int
    requests: list[DataRequest]
    chain_next: "WorkRequest | None" = None
    signaled: bool = True
    # mempool slots held by a preMR copy: (start, count)
    pool_slots: tuple[int, int] | None = None
    posted_at: int = -1

    @property
    def covers(self) -> list[int]:
        return [r.req_id for r in self.requests]

    @property
    def length(self) -> int:
        return sum(s.length for s in self.sge_list)

    def chain(self) -> list["WorkRequest"]:
        out = []
        wr: WorkRequest | None = self
        while wr is not None:
            out.append(wr)
            wr = wr.chain_next
        return out


@dataclass(slots=True)
class WorkCompletion:
    wr_id: int
    status: WcStatus
    completed_at: int
    covers: list[int]
    wr: WorkRequest | None = None


class CompletionQueue:
    def __init__(self, cq_id: int, capacity: int, owner: str = "per-qp"):
        self.cq_id = cq_id
        self.capacity = capacity
        self.owner = owner
        self.entries: deque[WorkCompletion] = deque()
        self.notify_armed = False
        # wired by the polling layer / NIC
        self.raise_interrupt: Callable[["CompletionQueue"], None] | None = None
        self.on_arrival: Callable[["CompletionQueue"], None] | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, wc: WorkCompletion) -> None:
        if len(self.entries) >= self.capacity:
            raise SimulationError(f"CQ {self.cq_id} overflow (capacity {self.capacity})")
        self.entries.append(wc)


class QueuePair:
    def __init__(self, qp_id: int, node: int, send_queue_depth: int, cq: CompletionQueue):
        self.qp_id = qp_id
        self.node = node
        self.send_queue_depth = send_queue_depth
        self.cq = cq
        self.outstanding = 0
        self._space: list[Signal] = []

    @property
    def room(self) -> int:
        return self.send_queue_depth - self.outstanding

    def reap(self, n: int = 1) -> None:
        self.outstanding -= n
        if self.outstanding < 0:
            raise SimulationError(f"QP {self.qp_id} reaped more WRs than posted")
        waiters, self._space = self._space, []
        for s in waiters:
            s.fire()


def poll_cq(cq: CompletionQueue, max_entries: int) -> list[WorkCompletion]:
    """Remove and return up to ``max_entries`` completions in FIFO order."""
    if max_entries < 1:
        raise ValueError("max_entries must be >= 1")
    n = min(max_entries, len(cq.entries))
    return [cq.entries.popleft() for _ in range(n)]


def request_notify(cq: CompletionQueue) -> None:
    """Arm the CQ.  Arming a non-empty CQ raises an interrupt right away."""
    if cq.notify_armed:
        return
    cq.notify_armed = True
    if cq.entries and cq.raise_interrupt is not None:
        cq.raise_interrupt(cq)


class MessagePool:
    """Pre-registered arena carved into fixed-size slots.

    A copy of ``n`` bytes takes ``ceil(n / slot_bytes)`` contiguous slots, so
    a merged message still needs a single SGE.  Safe for concurrent callers.
    """

    def __init__(self, region: MemoryRegion, slot_bytes: int, slots: int):
        if slot_bytes <= 0 or slots <= 0:
            raise ValueError("pool needs a positive slot size and count")
        self.region = region
        self.slot_bytes = slot_bytes
        self.slots = slots
        self._used = bytearray(slots)
        self._free = slots
        self._hint = 0
        self._lock = threading.Lock()
        self._waiters: list[Signal] = []

    @property
    def free(self) -> int:
        return self._free

    def slots_for(self, nbytes: int) -> int:
        return -(-nbytes // self.slot_bytes)

    def try_acquire(self, count: int) -> int | None:
        """First-fit run of ``count`` free slots; returns start index or None."""
        if count > self.slots:
            raise ValueError(f"copy needs {count} slots, pool has {self.slots}")
        with self._lock:
            if count > self._free:
                return None
            used = self._used
            for origin in (self._hint, 0):
                start = origin
                while start + count <= self.slots:
                    blocked = used.find(1, start, start + count)
                    if blocked < 0:
                        used[start : start + count] = b"\x01" * count
                        self._free -= count
                        self._hint = (start + count) % self.slots
                        return start
                    start = blocked + 1
            return None

    def release(self, start: int, count: int) -> None:
        with self._lock:
            if any(self._used[i] == 0 for i in range(start, start + count)):
                raise SimulationError(f"double release of pool slots {start}+{count}")
            self._used[start : start + count] = bytes(count)
            self._free += count
            waiters, self._waiters = self._waiters, []
        for s in waiters:
            s.fire()

    def acquire(self, sim: Simulator, count: int) -> Generator[Any, Any, int]:
        """Simulated acquire: blocks the calling process until slots free up."""
        while True:
            start = self.try_acquire(count)
            if start is not None:
                return start
            sig = Signal(sim)
            self._waiters.append(sig)
            yield sig

    def slot_addr(self, start: int) -> int:
        return self.region.base + start * self.slot_bytes


@dataclass
class SessionConfig:
    space: Space = Space.KERNEL
    send_queue_depth: int = 512
    slot_bytes: int = BLOCK
    mempool_slots: int = 4096


class Session:
    """Connection state for every peer plus the mempool and handlers."""

    def __init__(self, sim: Simulator, nic: "Nic", config: SessionConfig | None = None):
        self.sim = sim
        self.nic = nic
        self.config = config or SessionConfig()
        self.peers: dict[int, list[QueuePair]] = {}
        self.cqs: list[CompletionQueue] = []
        self.handlers: list[Callable[[WorkCompletion], None]] = []
        self.started = False
        self._mr_ids = itertools.count(1)
        self._wr_ids = itertools.count(1)
        self._qp_ids = itertools.count(0)
        self._local_top = 1 << 40
        self._rr: dict[int, int] = {}
        self.mempool = MessagePool(
            self.register_mr(self.config.space, self.config.slot_bytes * self.config.mempool_slots, MrKind.PRE),
            self.config.slot_bytes,
            self.config.mempool_slots,
        )

    # -- wiring -----------------------------------------------------------
    def add_cq(self, owner: str = "per-qp", capacity: int | None = None) -> CompletionQueue:
        cq = CompletionQueue(len(self.cqs), capacity or self.config.send_queue_depth, owner)
        self.cqs.append(cq)
        return cq

    def add_qp(self, node: int, cq: CompletionQueue) -> QueuePair:
        qp = QueuePair(next(self._qp_ids), node, self.config.send_queue_depth, cq)
        self.peers.setdefault(node, []).append(qp)
        return qp

    def register_handler(self, fn: Callable[[WorkCompletion], None]) -> None:
        self.handlers.append(fn)

    def next_qp(self, node: int) -> QueuePair:
        """Round-robin over the node's QPs, one step per doorbell."""
        qps = self.peers.get(node)
        if not qps:
            raise SimulationError(f"no connection to node {node}")
        i = self._rr.get(node, 0)
        self._rr[node] = (i + 1) % len(qps)
        return qps[i]

    # -- memory -----------------------------------------------------------
    def alloc_local(self, length: int) -> int:
        """Synthetic address for an application data buffer."""
        addr = self._local_top
        self._local_top += -(-length // PAGE) * PAGE
        return addr

    def register_mr(self, space: Space, length: int, kind: MrKind) -> MemoryRegion:
        if length <= 0:
            raise ValueError("MR length must be positive")
        if kind is MrKind.PRE and self.started:
            raise SimulationError("pre-registered regions are only created at init")
        space = Space(space)
        base = self.alloc_local(length)
        cost = self.nic.mr_cost(space, kind, length)
        mr = MemoryRegion(next(self._mr_ids), base, length, MrKind(kind), space, self.sim.now, cost)
        self.nic.on_register(mr)
        return mr

    def deregister_mr(self, mr: MemoryRegion) -> None:
        self.nic.on_deregister(mr)

    def new_wr_id(self) -> int:
        return next(self._wr_ids)

    # -- data path --------------------------------------------------------
    def post_send(self, qp: QueuePair, head: WorkRequest) -> Generator[Any, Any, None]:
        """Post a chain with one doorbell; blocks while the send queue is full."""
        chain = head.chain()
        if any(wr.qp is not qp for wr in chain):
            raise SimulationError("chain spans more than one QP")
        if len(chain) > qp.send_queue_depth:
            raise SimulationError("chain longer than the send queue")
        if not self.handlers:
            raise SimulationError("register a completion handler before posting")
        self.started = True
        while qp.room < len(chain):
            sig = Signal(self.sim)
            qp._space.append(sig)
            yield sig
        qp.outstanding += len(chain)
        self.nic.accept_post(chain)

    def dispatch(self, wc: WorkCompletion) -> None:
        for fn in self.handlers:
            fn(wc)

    def iter_qps(self) -> Iterator[QueuePair]:
        for node in sorted(self.peers):
            yield from self.peers[node]
