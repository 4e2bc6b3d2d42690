"""Synthetic request streams and the trace file format.

Trace file::

    #rdmabox-trace v1
    arrive_at_ns,R|W,node,remote_addr_hex,len,actor
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .verbs import BLOCK, DataRequest, Direction

HEADER = "#rdmabox-trace v1"


class TraceFormatError(ValueError):
    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


@dataclass(frozen=True, slots=True)
class TraceRecord:
    arrive_at: int
    direction: Direction
    node: int
    remote_addr: int
    length: int
    actor: int = 0

    def to_line(self) -> str:
        return f"{self.arrive_at},{self.direction.value},{self.node},{self.remote_addr:#x},{self.length},{self.actor}"

    def request(self, req_id: int) -> DataRequest:
        return DataRequest(req_id, self.direction, self.node, self.remote_addr, self.length, self.arrive_at, self.actor)


Trace = list[TraceRecord]


@dataclass(frozen=True)
class BurstSpec:
    """Clusters of ``cluster_size`` requests; ``cluster_size == 1`` is the
    strictly sequential pattern when replayed closed-loop."""

    cluster_size: int = 1
    inter_burst_gap: int = 20_000
    intra_burst_gap: int = 0
    total_requests: int = 2_000
    req_len: int = BLOCK
    nodes: int = 1
    actors: int = 1
    keyspace: int = 1 << 16
    read_fraction: float = 0.0
    # a cluster covers one contiguous address range instead of random slots
    sequential: bool = False

    def validate(self) -> None:
        if self.cluster_size < 1:
            raise ValueError("cluster_size must be >= 1")
        if self.total_requests < 0:
            raise ValueError("total_requests must be >= 0")
        if self.inter_burst_gap < 0 or self.intra_burst_gap < 0:
            raise ValueError("gaps must be >= 0")
        if self.req_len < 1 or self.req_len > BLOCK:
            raise ValueError(f"req_len must be in [1, {BLOCK}]")
        if self.nodes < 1 or self.actors < 1 or self.keyspace < 1:
            raise ValueError("nodes, actors and keyspace must be >= 1")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise ValueError("read_fraction must be in [0, 1]")


@dataclass(frozen=True)
class MixSpec:
    read_fraction: float = 0.95
    zipf_theta: float = 0.99
    keyspace: int = 1 << 15
    nodes: int = 1
    # probability that a request continues right after the previous one
    seq_prob: float = 0.3
    req_len: int = BLOCK
    mean_gap_ns: float = 2_000.0
    actors: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.read_fraction <= 1.0:
            raise ValueError("read_fraction must be in [0, 1]")
        if self.zipf_theta < 0:
            raise ValueError("zipf_theta must be >= 0")
        if self.keyspace < 1 or self.nodes < 1 or self.actors < 1:
            raise ValueError("keyspace, nodes and actors must be >= 1")
        if self.nodes > self.keyspace:
            raise ValueError("more nodes than keyspace slots")
        if not 0.0 <= self.seq_prob < 1.0:
            raise ValueError("seq_prob must be in [0, 1)")
        if self.req_len < 1 or self.req_len > BLOCK:
            raise ValueError(f"req_len must be in [1, {BLOCK}]")
        if self.mean_gap_ns < 0:
            raise ValueError("mean_gap_ns must be >= 0")


ETC = MixSpec(read_fraction=0.95)
SYS = MixSpec(read_fraction=0.75)
MIXES = {"etc": ETC, "sys": SYS}


def zipf_cdf(keyspace: int, theta: float) -> np.ndarray:
    weights = np.arange(1, keyspace + 1, dtype=np.float64) ** -theta
    cdf = np.cumsum(weights)
    return cdf / cdf[-1]


def gen_kv(mix: MixSpec, n: int, seed: int) -> Trace:
    """Zipf-ranked slot accesses; rank ``k`` lives at slot ``k`` so hot keys
    sit next to each other.  Slots are ``req_len`` bytes and are split into
    contiguous per-node ranges."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mix.validate()
    rng = np.random.default_rng(seed)
    slots = np.searchsorted(zipf_cdf(mix.keyspace, mix.zipf_theta), rng.random(n), side="right")
    slots = np.minimum(slots, mix.keyspace - 1)
    reads = rng.random(n) < mix.read_fraction
    cont = rng.random(n) < mix.seq_prob
    gaps = np.rint(rng.exponential(mix.mean_gap_ns, n)).astype(np.int64) if mix.mean_gap_ns else np.zeros(n, np.int64)
    per_node = -(-mix.keyspace // mix.nodes)

    out: Trace = []
    t = 0
    prev_slot = -1
    prev_read = True
    for i in range(n):
        slot = int(slots[i])
        is_read = bool(reads[i])
        if cont[i] and 0 <= prev_slot < mix.keyspace - 1:
            slot = prev_slot + 1
            is_read = prev_read
        t += int(gaps[i])
        node = slot // per_node
        out.append(
            TraceRecord(
                t,
                Direction.READ if is_read else Direction.WRITE,
                node,
                (slot - node * per_node) * mix.req_len,
                mix.req_len,
                i % mix.actors,
            )
        )
        prev_slot, prev_read = slot, is_read
    return out


def gen_burst(spec: BurstSpec, seed: int) -> Trace:
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.total_requests
    slots = rng.integers(0, spec.keyspace, n)
    reads = rng.random(n) < spec.read_fraction
    out: Trace = []
    t = 0
    for i in range(n):
        c, k = divmod(i, spec.cluster_size)
        if i:
            t += spec.intra_burst_gap if k else spec.inter_burst_gap
        if spec.sequential:
            first = c * spec.cluster_size
            slot = (int(slots[first]) + k) % spec.keyspace
            node = c % spec.nodes
            is_read = bool(reads[first])
        else:
            slot = int(slots[i])
            node = i % spec.nodes
            is_read = bool(reads[i])
        out.append(
            TraceRecord(
                t,
                Direction.READ if is_read else Direction.WRITE,
                node,
                slot * spec.req_len,
                spec.req_len,
                c % spec.actors,
            )
        )
    return out


def burst_preset(name: str, large_cluster: int, **overrides) -> BurstSpec:
    """small = 1, large = calibrated size, medium = ceil((1 + large) / 2)."""
    sizes = {"small": 1, "large": large_cluster, "medium": math.ceil((1 + large_cluster) / 2)}
    if name not in sizes:
        raise ValueError(f"unknown burst preset {name!r}")
    return BurstSpec(cluster_size=sizes[name], **overrides)


def save_trace(trace: Iterable[TraceRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(HEADER + "\n")
        for rec in trace:
            f.write(rec.to_line() + "\n")


def parse_line(text: str, path: str = "<trace>", lineno: int = 0) -> TraceRecord:
    parts = text.split(",")
    if len(parts) != 6:
        raise TraceFormatError(path, lineno, f"expected 6 fields, got {len(parts)}")
    t, d, node, addr, length, actor = parts
    try:
        direction = Direction(d)
    except ValueError:
        raise TraceFormatError(path, lineno, f"direction must be R or W, got {d!r}") from None
    try:
        if not addr.lower().startswith("0x"):
            raise ValueError
        rec = TraceRecord(int(t), direction, int(node), int(addr, 16), int(length), int(actor))
    except ValueError:
        raise TraceFormatError(path, lineno, "malformed number") from None
    if rec.arrive_at < 0 or rec.node < 0 or rec.remote_addr < 0 or rec.actor < 0:
        raise TraceFormatError(path, lineno, "negative field")
    if rec.length <= 0:
        raise TraceFormatError(path, lineno, "length must be positive")
    return rec


def load_trace(path: str | os.PathLike) -> Trace:
    p = str(path)
    out: Trace = []
    with open(path, encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines:
        return out
    if lines[0] != HEADER:
        raise TraceFormatError(p, 1, f"missing header {HEADER!r}")
    last = 0
    for lineno, text in enumerate(lines[1:], start=2):
        if not text:
            raise TraceFormatError(p, lineno, "blank line")
        rec = parse_line(text, p, lineno)
        if rec.arrive_at < last:
            raise TraceFormatError(p, lineno, f"timestamp {rec.arrive_at} goes backwards (previous {last})")
        last = rec.arrive_at
        out.append(rec)
    return out


def requests_from(trace: Sequence[TraceRecord]) -> list[DataRequest]:
    return [rec.request(i) for i, rec in enumerate(trace)]
