"""Deterministic discrete-event kernel.

Virtual time is an integer count of nanoseconds.  Events that share a
timestamp are dispatched in the order they were scheduled, so a run is a
pure function of its inputs.

Simulated threads ("actors", pollers) are plain generators driven by
:class:`Process`.  A generator may yield

* an ``int`` -- sleep that many nanoseconds,
* a :class:`Signal` -- block until the signal fires (the fired value is sent
  back into the generator).
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterable

# event kinds
POST_ARRIVAL = "post-arrival"
NIC_STEP = "nic-step"
COMPLETION = "completion-delivery"
INTERRUPT = "interrupt"
WAKEUP = "actor-wakeup"

COUNTERS = (
    "wqe_posted",
    "mmio_count",
    "dma_read_count",
    "interrupts",
    "context_switches",
    "wc_polled",
    "merges",
    "chains",
    "requests_in",
    "requests_completed",
)
GAUGES = ("in_flight_bytes", "in_flight_ops", "merge_queue_depth")
HISTOGRAMS = ("request_latency", "io_completion_time")


class SimulationError(RuntimeError):
    """A broken kernel contract; the run cannot continue."""


@dataclass(slots=True)
class SimEvent:
    fire_at: int
    kind: str
    callback: Callable[..., Any] | None = None
    payload: Any = None
    seq: int = -1
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


class Histogram:
    __slots__ = ("name", "values")

    def __init__(self, name: str):
        self.name = name
        self.values: list[int] = []

    def record(self, value: int) -> None:
        self.values.append(value)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return sum(self.values) / len(self.values) if self.values else 0.0

    def percentile(self, q: float) -> int:
        """Nearest-rank percentile, ``q`` in [0, 100]."""
        if not self.values:
            return 0
        ordered = sorted(self.values)
        rank = max(1, math.ceil(q / 100.0 * len(ordered)))
        return ordered[rank - 1]

    def summary(self) -> dict[str, Any]:
        return {
            "count": len(self.values),
            "mean": round(self.mean, 3),
            "p50": self.percentile(50),
            "p99": self.percentile(99),
            "max": max(self.values) if self.values else 0,
        }


class Gauge:
    """Piecewise-constant value with a change log for time averaging."""

    __slots__ = ("name", "value", "peak", "_sim", "_changes")

    def __init__(self, name: str, sim: "Simulator"):
        self.name = name
        self.value = 0
        self.peak = 0
        self._sim = sim
        self._changes: list[tuple[int, int]] = [(0, 0)]

    def set(self, value: int) -> None:
        if value == self.value:
            return
        self.value = value
        self.peak = max(self.peak, value)
        now = self._sim.now
        if self._changes[-1][0] == now:
            self._changes[-1] = (now, value)
        else:
            self._changes.append((now, value))

    def add(self, delta: int) -> None:
        self.set(self.value + delta)

    def time_mean(self, start: int = 0, end: int | None = None) -> float:
        end = self._sim.now if end is None else end
        if end <= start:
            return float(self.value)
        area = 0
        changes = self._changes
        for i, (t, v) in enumerate(changes):
            t_next = changes[i + 1][0] if i + 1 < len(changes) else end
            lo, hi = max(t, start), min(t_next, end)
            if hi > lo:
                area += v * (hi - lo)
        return area / (end - start)

    def sample(self, interval: int, end: int | None = None) -> list[int]:
        """Values at t = 0, interval, 2*interval, ... <= end."""
        end = self._sim.now if end is None else end
        out = []
        idx = 0
        changes = self._changes
        t = 0
        while t <= end:
            while idx + 1 < len(changes) and changes[idx + 1][0] <= t:
                idx += 1
            out.append(changes[idx][1])
            t += interval
        return out


class MetricsRegistry:
    """Counters, gauges and histograms every module reports into."""

    def __init__(self, sim: "Simulator"):
        self._sim = sim
        self.counters: dict[str, int] = {name: 0 for name in COUNTERS}
        self.gauges: dict[str, Gauge] = {name: Gauge(name, sim) for name in GAUGES}
        self.histograms: dict[str, Histogram] = {name: Histogram(name) for name in HISTOGRAMS}

    def inc(self, name: str, n: int = 1) -> None:
        if n < 0:
            raise SimulationError(f"counter {name} cannot decrease (n={n})")
        self.counters[name] = self.counters.get(name, 0) + n
        if name == "requests_completed" and self.counters[name] > self.counters["requests_in"]:
            raise SimulationError("requests_completed exceeded requests_in")

    def gauge(self, name: str) -> Gauge:
        if name not in self.gauges:
            self.gauges[name] = Gauge(name, self._sim)
        return self.gauges[name]

    def histogram(self, name: str) -> Histogram:
        if name not in self.histograms:
            self.histograms[name] = Histogram(name)
        return self.histograms[name]

    def observe(self, name: str, value: int) -> None:
        self.histogram(name).record(value)

    def snapshot(self) -> dict[str, Any]:
        return {
            "counters": dict(sorted(self.counters.items())),
            "gauges": {
                name: {
                    "final": g.value,
                    "peak": g.peak,
                    "mean": round(g.time_mean(), 3),
                }
                for name, g in sorted(self.gauges.items())
            },
            "histograms": {name: h.summary() for name, h in sorted(self.histograms.items())},
        }


@dataclass
class RunSummary:
    clock: int
    dispatched: int
    pending: int
    metrics: dict[str, Any] = field(default_factory=dict)

    @property
    def quiescent(self) -> bool:
        return self.pending == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "clock": self.clock,
            "dispatched": self.dispatched,
            "pending": self.pending,
            **self.metrics,
        }


class Simulator:
    def __init__(self) -> None:
        self.now = 0
        self._queue: list[tuple[int, int, SimEvent]] = []
        self._seq = itertools.count()
        self.dispatched = 0
        self.metrics = MetricsRegistry(self)
        # optional observer called after every dispatch: fn(sim, event)
        self.on_dispatch: Callable[["Simulator", SimEvent], None] | None = None

    # -- scheduling -------------------------------------------------------
    def schedule(self, event: SimEvent) -> SimEvent:
        if event.fire_at < self.now:
            raise SimulationError(
                f"event {event.kind!r} scheduled at {event.fire_at} but clock is {self.now}"
            )
        event.seq = next(self._seq)
        heapq.heappush(self._queue, (event.fire_at, event.seq, event))
        return event

    def call_at(self, when: int, kind: str, callback: Callable[..., Any], payload: Any = None) -> SimEvent:
        return self.schedule(SimEvent(int(when), kind, callback, payload))

    def call_after(self, delay: int, kind: str, callback: Callable[..., Any], payload: Any = None) -> SimEvent:
        return self.call_at(self.now + int(delay), kind, callback, payload)

    @property
    def pending(self) -> int:
        return sum(1 for _, _, ev in self._queue if not ev.cancelled)

    # -- running ----------------------------------------------------------
    def run_until(self, deadline: float = math.inf) -> RunSummary:
        queue = self._queue
        hook = self.on_dispatch
        while queue and queue[0][0] <= deadline:
            fire_at, _, event = heapq.heappop(queue)
            if event.cancelled:
                continue
            self.now = fire_at
            self.dispatched += 1
            if event.callback is not None:
                if event.payload is None:
                    event.callback()
                else:
                    event.callback(event.payload)
            if hook is not None:
                hook(self, event)
        return RunSummary(self.now, self.dispatched, self.pending, self.metrics.snapshot())

    def run(self) -> RunSummary:
        return self.run_until(math.inf)

    def process(self, gen: Generator, name: str = "") -> "Process":
        return Process(self, gen, name)


class Signal:
    """One-shot wakeup.  Waiting on an already fired signal returns at once."""

    __slots__ = ("_sim", "_waiters", "fired", "value")

    def __init__(self, sim: Simulator):
        self._sim = sim
        self._waiters: list[Process] = []
        self.fired = False
        self.value: Any = None

    def fire(self, value: Any = None) -> None:
        if self.fired:
            return
        self.fired = True
        self.value = value
        waiters, self._waiters = self._waiters, []
        for proc in waiters:
            self._sim.call_at(self._sim.now, WAKEUP, proc._resume, (value,))


class Process:
    """Drives a generator through the event loop."""

    __slots__ = ("sim", "gen", "name", "done", "finished")

    def __init__(self, sim: Simulator, gen: Generator, name: str = ""):
        self.sim = sim
        self.gen = gen
        self.name = name
        self.done = False
        self.finished = Signal(sim)
        sim.call_at(sim.now, WAKEUP, self._resume, (None,))

    def _resume(self, boxed: tuple) -> None:
        value = boxed[0]
        while True:
            try:
                cmd = self.gen.send(value)
            except StopIteration:
                self.done = True
                self.finished.fire()
                return
            if isinstance(cmd, Signal):
                if cmd.fired:
                    value = cmd.value
                    continue
                cmd._waiters.append(self)
                return
            delay = int(cmd)
            if delay < 0:
                raise SimulationError(f"process {self.name} asked to sleep {delay} ns")
            if delay == 0:
                value = None
                continue
            self.sim.call_after(delay, WAKEUP, self._resume, (None,))
            return


def all_of(sim: Simulator, signals: Iterable[Signal]) -> Generator:
    for s in signals:
        yield s
