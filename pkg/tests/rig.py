"""Small hand-wired simulations for module-level tests."""

from __future__ import annotations

from dataclasses import dataclass, field

from rdmasim.admission import TrafficRegulator
from rdmasim.batching import Batcher, BatchPolicy
from rdmasim.kernel import Simulator
from rdmasim.nic import Nic, NicConfig
from rdmasim.polling import Busy, CpuModel, Poller, PollingStrategy
from rdmasim.verbs import (
    CompletionQueue,
    DataRequest,
    Direction,
    MrKind,
    Opcode,
    QueuePair,
    ScatterGatherEntry,
    Session,
    SessionConfig,
    Space,
    WorkCompletion,
    WorkRequest,
)

KiB = 1024


@dataclass
class Rig:
    sim: Simulator
    nic: Nic
    session: Session
    qps: dict[int, QueuePair]
    cqs: list[CompletionQueue]
    completions: list[WorkCompletion] = field(default_factory=list)

    @property
    def counters(self) -> dict[str, int]:
        return self.sim.metrics.counters

    def wr(self, node: int = 0, length: int = 4 * KiB, remote_addr: int = 0, req_ids=()) -> WorkRequest:
        """A dynMR work request carrying fresh DataRequests."""
        qp = self.qps[node]
        mr = self.session.register_mr(self.session.config.space, length, MrKind.DYN)
        reqs = [DataRequest(i, Direction.WRITE, node, remote_addr, length) for i in (req_ids or [self.session.new_wr_id()])]
        return WorkRequest(
            self.session.new_wr_id(), qp, Opcode.RDMA_WRITE, [ScatterGatherEntry(mr.base, length, mr)], remote_addr, reqs
        )

    def post(self, *wrs: WorkRequest) -> None:
        """Post ``wrs`` as one chain from a throwaway process."""
        for a, b in zip(wrs, wrs[1:]):
            a.chain_next = b

        def proc():
            yield from self.session.post_send(wrs[0].qp, wrs[0])

        self.sim.process(proc())

    def drain(self) -> None:
        """Pop every CQ into ``completions`` (no polling strategy involved)."""
        for cq in self.cqs:
            while cq.entries:
                wc = cq.entries.popleft()
                wc.wr.qp.reap()
                self.completions.append(wc)


def make_rig(nodes: int = 1, nic: NicConfig | None = None, space: Space = Space.KERNEL, sqd: int = 512) -> Rig:
    sim = Simulator()
    n = Nic(sim, nic or NicConfig())
    session = Session(sim, n, SessionConfig(space=space, send_queue_depth=sqd, mempool_slots=64))
    session.register_handler(lambda wc: None)
    qps = {}
    cqs = []
    for node in range(nodes):
        cq = session.add_cq()
        cqs.append(cq)
        qps[node] = session.add_qp(node, cq)
    return Rig(sim, n, session, qps, cqs)


def make_batcher(
    nodes: int = 1,
    policy: BatchPolicy | None = None,
    window: int = 0,
    fragment: int = 128 * KiB,
    space: Space = Space.KERNEL,
    nic: NicConfig | None = None,
    strategy: PollingStrategy | None = None,
) -> tuple[Rig, Batcher]:
    """A batcher whose CQs are drained by real pollers (Busy by default)."""
    rig = make_rig(nodes, nic, space)
    reg = TrafficRegulator(window, fragment, on_change=rig.sim.metrics.gauges["in_flight_bytes"].set)
    cpu = CpuModel(0)
    b = Batcher(rig.sim, rig.session, policy or BatchPolicy(), reg, cpu)
    rig.session.handlers.clear()
    rig.session.register_handler(b.on_completion)
    rig.session.register_handler(rig.completions.append)
    for cq in rig.cqs:
        p = Poller(rig.sim, cq, strategy or Busy(), cpu, rig.session.dispatch)
        rig.nic.wire_cq(cq, p.on_interrupt, p.on_arrival)
        p.start()
    return rig, b
