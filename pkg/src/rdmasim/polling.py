"""Completion-handling strategies.

Every CQ (or shared CQ) gets one :class:`Poller`.  Interrupt-driven
strategies arm the CQ and run only after an interrupt; ``Busy`` and
``SharedCq`` spin from time zero and never arm.

Empty polling is not simulated one poll at a time.  A spinning poller
remembers when it started and its per-poll period; a completion landing
at ``t`` is noticed by the first poll that ends at or after ``t``, and an
adaptive poller gives up after its remaining retry budget of empty polls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Generator, Union

from .kernel import WAKEUP, SimEvent, Signal, Simulator
from .verbs import CompletionQueue, WorkCompletion, poll_cq, request_notify

ARMED_IDLE = "armed-idle"
POLLING = "polling"
SPINNING = "spinning"

_WC = "wc"
_TIMEOUT = "timeout"


@dataclass(frozen=True)
class EventTriggered:
    """One completion per interrupt, then re-arm."""

    name = "event"


@dataclass(frozen=True)
class Busy:
    max_poll_wc: int = 16
    name = "busy"


@dataclass(frozen=True)
class EventBatch:
    budget: int = 16
    name = "event_batch"


@dataclass(frozen=True)
class Hybrid:
    """Poll until the first empty poll, then re-arm."""

    name = "hybrid"


@dataclass(frozen=True)
class SharedCq:
    m: int = 1
    max_poll_wc: int = 16
    name = "shared_cq"


@dataclass(frozen=True)
class Adaptive:
    max_poll_wc: int = 16
    max_retry: int = 120
    # Reset the empty-poll count after a non-empty batch.  Off gives the
    # literal loop, where a long-lived poller eventually re-arms under load.
    reset_retry: bool = True
    name = "adaptive"


PollingStrategy = Union[EventTriggered, Busy, EventBatch, Hybrid, SharedCq, Adaptive]

STRATEGIES = {
    "event": EventTriggered,
    "busy": Busy,
    "event_batch": EventBatch,
    "hybrid": Hybrid,
    "shared_cq": SharedCq,
    "adaptive": Adaptive,
}


def make_strategy(name: str, **params: Any) -> PollingStrategy:
    try:
        cls = STRATEGIES[name]
    except KeyError:
        raise ValueError(f"unknown polling strategy {name!r}; expected one of {sorted(STRATEGIES)}") from None
    accepted = set(getattr(cls, "__dataclass_fields__", {}))
    strategy = cls(**{k: v for k, v in params.items() if k in accepted})
    validate_strategy(strategy)
    return strategy


def validate_strategy(s: PollingStrategy) -> None:
    if isinstance(s, EventBatch) and s.budget < 1:
        raise ValueError("budget must be >= 1")
    if isinstance(s, (Busy, SharedCq, Adaptive)) and s.max_poll_wc < 1:
        raise ValueError("max_poll_wc must be >= 1")
    if isinstance(s, Adaptive) and s.max_retry < 0:
        raise ValueError("max_retry must be >= 0")
    if isinstance(s, SharedCq) and s.m < 1:
        raise ValueError("shared CQ count must be >= 1")


def spins_forever(s: PollingStrategy) -> bool:
    return isinstance(s, (Busy, SharedCq))


class CpuModel:
    """Host CPU budget.

    ``runnable`` counts actors computing plus pollers that are currently
    active.  A piece of CPU work started while more contexts are runnable
    than there are cores is stretched by ``runnable / cores``.  ``cores=0``
    disables contention.
    """

    def __init__(self, cores: int = 0):
        if cores < 0:
            raise ValueError("cores must be >= 0")
        self.cores = cores
        self.runnable = 0

    def factor(self, counted: bool) -> float:
        if not self.cores:
            return 1.0
        load = self.runnable if counted else self.runnable + 1
        return max(1.0, load / self.cores)

    def scaled(self, base: int, counted: bool = False) -> int:
        if base <= 0:
            return 0
        return math.ceil(base * self.factor(counted))

    def work(self, base: int) -> Generator[Any, Any, None]:
        """Run ``base`` ns of CPU work for a context not already counted."""
        duration = self.scaled(base)
        if duration:
            self.runnable += 1
            yield duration
            self.runnable -= 1


@dataclass
class PollCosts:
    poll_ns: int = 80
    handle_ns: int = 300
    interrupt_ns: int = 2000
    context_switch_ns: int = 3000


class Poller:
    def __init__(
        self,
        sim: Simulator,
        cq: CompletionQueue,
        strategy: PollingStrategy,
        cpu: CpuModel,
        handle: Callable[[WorkCompletion], None],
        costs: PollCosts | None = None,
        name: str = "",
    ):
        self.sim = sim
        self.cq = cq
        self.strategy = strategy
        self.cpu = cpu
        self.handle = handle
        self.costs = costs or PollCosts()
        self.name = name or f"poller{cq.cq_id}"
        self.mode = ARMED_IDLE
        self.retry = 0
        self.cpu_busy_time = 0
        self.handled = 0
        self.entries: list[int] = []  # completions handled per interrupt entry
        self._active_since: int | None = None
        self._wake: Signal | None = None
        self._spin_t0 = 0
        self._spin_p = 1
        self._spin_budget: int | None = None
        self._exit_ev: SimEvent | None = None
        self._detect_ev: SimEvent | None = None
        self.on_poll: Callable[[list[WorkCompletion]], None] | None = None

    # -- lifecycle --------------------------------------------------------
    def start(self) -> None:
        if spins_forever(self.strategy):
            self._activate()
            self.sim.process(self._spin_loop(), self.name)
        else:
            request_notify(self.cq)

    def finish(self) -> None:
        """Close the CPU accounting at the end of a run."""
        if self._active_since is not None:
            self.cpu_busy_time += self.sim.now - self._active_since
            self._active_since = self.sim.now

    def on_interrupt(self, cq: CompletionQueue) -> None:
        self.sim.process(self._interrupt_entry(), self.name)

    def on_arrival(self, cq: CompletionQueue) -> None:
        if self.mode != SPINNING or self._detect_ev is not None:
            return
        now = self.sim.now
        p = self._spin_p
        j = max(1, -(-(now - self._spin_t0) // p))
        if self._spin_budget is not None and j > self._spin_budget:
            return
        if self._exit_ev is not None:
            self._exit_ev.cancel()
            self._exit_ev = None
        assert self._wake is not None
        self._detect_ev = self.sim.call_at(self._spin_t0 + j * p, WAKEUP, self._wake.fire, (_WC, j))

    # -- helpers ----------------------------------------------------------
    def _activate(self) -> None:
        if self._active_since is None:
            self._active_since = self.sim.now
            self.cpu.runnable += 1
        self.mode = POLLING

    def _deactivate(self) -> None:
        if self._active_since is not None:
            self.cpu_busy_time += self.sim.now - self._active_since
            self._active_since = None
            self.cpu.runnable -= 1
        self.mode = ARMED_IDLE

    def _rearm(self) -> None:
        self._deactivate()
        request_notify(self.cq)

    def _period(self) -> int:
        return max(1, self.cpu.scaled(self.costs.poll_ns, counted=True))

    def _poll(self, limit: int) -> list[WorkCompletion]:
        wcs = poll_cq(self.cq, limit)
        if wcs:
            self.sim.metrics.counters["wc_polled"] += len(wcs)
            for wc in wcs:
                if wc.wr is not None:
                    wc.wr.qp.reap()
            if self.on_poll is not None:
                self.on_poll(wcs)
        return wcs

    def _handle(self, wcs: list[WorkCompletion]) -> Generator[Any, Any, None]:
        for wc in wcs:
            cost = self.cpu.scaled(self.costs.handle_ns, counted=True)
            if cost:
                yield cost
            self.handle(wc)
            self.handled += 1

    def _spin(self, budget: int | None) -> Generator[Any, Any, tuple[str, int]]:
        """Empty-poll until a completion is seen or ``budget`` polls pass."""
        sim = self.sim
        p = self._period()
        self._spin_t0 = sim.now
        self._spin_p = p
        self._spin_budget = budget
        self._wake = Signal(sim)
        self._detect_ev = None
        self._exit_ev = None
        self.mode = SPINNING
        if budget is not None:
            self._exit_ev = sim.call_at(sim.now + budget * p, WAKEUP, self._wake.fire, (_TIMEOUT, budget))
        outcome = yield self._wake
        for ev in (self._exit_ev, self._detect_ev):
            if ev is not None:
                ev.cancel()
        self._exit_ev = self._detect_ev = None
        self.mode = POLLING
        return outcome

    # -- strategy bodies --------------------------------------------------
    def _interrupt_entry(self) -> Generator[Any, Any, None]:
        self._activate()
        entry_cost = self.costs.interrupt_ns + self.costs.context_switch_ns
        yield self.cpu.scaled(entry_cost, counted=True)
        s = self.strategy
        handled_before = self.handled
        if isinstance(s, EventTriggered):
            yield from self._batch_once(1)
        elif isinstance(s, EventBatch):
            yield from self._batch_once(s.budget)
        elif isinstance(s, Hybrid):
            yield from self._hybrid()
        elif isinstance(s, Adaptive):
            yield from self._adaptive(s)
        else:
            raise TypeError(f"{type(s).__name__} is not interrupt driven")
        self.entries.append(self.handled - handled_before)
        self._rearm()

    def _batch_once(self, limit: int) -> Generator[Any, Any, None]:
        yield self._period()
        yield from self._handle(self._poll(limit))

    def _hybrid(self) -> Generator[Any, Any, None]:
        while True:
            yield self._period()
            wcs = self._poll(self.cq.capacity)
            if not wcs:
                return
            yield from self._handle(wcs)

    def _adaptive(self, s: Adaptive) -> Generator[Any, Any, None]:
        self.retry = 0
        while True:
            yield self._period()
            wcs = self._poll(s.max_poll_wc)
            while not wcs:
                if self.retry >= s.max_retry:
                    return
                self.retry += 1
                outcome, polls = yield from self._spin(s.max_retry - self.retry + 1)
                if outcome == _TIMEOUT:
                    self.retry = s.max_retry
                    return
                self.retry += polls - 1
                wcs = self._poll(s.max_poll_wc)
            yield from self._handle(wcs)
            if s.reset_retry:
                self.retry = 0

    def _spin_loop(self) -> Generator[Any, Any, None]:
        limit = self.strategy.max_poll_wc  # type: ignore[union-attr]
        while True:
            yield self._period()
            wcs = self._poll(limit)
            if not wcs:
                yield from self._spin(None)
                wcs = self._poll(limit)
            yield from self._handle(wcs)
