"""Window-based in-flight byte limiter that sits on the merge queue.

The regulator itself is a small lock-protected state machine.  Blocking is
supplied by the caller: simulated processes wait on a :class:`Signal`
(:func:`pacer_blocking`), real threads on a :class:`threading.Event`
(:meth:`TrafficRegulator.wait_blocking`).
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Generator

from .kernel import Signal, SimulationError, Simulator

# (in_flight_bytes, window_bytes, latency_sample_ns) -> new window or None
AdmissionHook = Callable[[int, int, "int | None"], "int | None"]


class AdmissionError(ValueError):
    """Regulator misconfiguration (e.g. a request larger than the window)."""


@dataclass(slots=True)
class Ticket:
    need: int
    wake: Any  # object with a zero-arg-compatible ``fire``/``set``
    admitted: bool = False

    def notify(self) -> None:
        if isinstance(self.wake, threading.Event):
            self.wake.set()
        else:
            self.wake.fire()


class TrafficRegulator:
    def __init__(
        self,
        window_bytes: int = 0,
        fragment_bytes: int = 128 * 1024,
        hook: AdmissionHook | None = None,
        on_change: Callable[[int], None] | None = None,
    ):
        if window_bytes < 0:
            raise AdmissionError("window_bytes must be >= 0")
        if fragment_bytes <= 0:
            raise AdmissionError("fragment_bytes must be positive")
        self.window_bytes = window_bytes
        self.fragment_bytes = fragment_bytes
        self.hook = hook
        self.in_flight_bytes = 0
        self.peak_in_flight = 0
        self.violations = 0
        self.waiters: deque[Ticket] = deque()
        self._lock = threading.Lock()
        self._on_change = on_change

    @property
    def enabled(self) -> bool:
        return self.window_bytes > 0

    def round(self, nbytes: int) -> int:
        if nbytes <= 0:
            raise AdmissionError("need must be positive")
        frag = self.fragment_bytes
        return -(-nbytes // frag) * frag

    def check_need(self, nbytes: int) -> None:
        """Scenario-load check: a single request must fit in the window."""
        if self.enabled and self.round(nbytes) > self.window_bytes:
            raise AdmissionError(
                f"request of {nbytes} B ({self.round(nbytes)} B in fragments) exceeds window {self.window_bytes} B"
            )

    # -- state transitions (caller holds no lock) -------------------------
    def _fits(self, need: int) -> bool:
        return not self.enabled or self.in_flight_bytes + need <= self.window_bytes

    def _charge(self, need: int) -> None:
        self.in_flight_bytes += need
        if self.in_flight_bytes > self.peak_in_flight:
            self.peak_in_flight = self.in_flight_bytes
        if self.enabled and self.in_flight_bytes > self.window_bytes:
            self.violations += 1

    def try_charge(self, nbytes: int) -> bool:
        """Admit without blocking; never jumps ahead of queued waiters."""
        need = self.round(nbytes)
        with self._lock:
            if self.waiters or not self._fits(need):
                return False
            self._charge(need)
            value = self.in_flight_bytes
        self._changed(value)
        return True

    def enqueue(self, nbytes: int, wake: Any) -> Ticket:
        """Admit now (ticket.admitted) or park the ticket FIFO."""
        need = self.round(nbytes)
        ticket = Ticket(need, wake)
        with self._lock:
            if not self.waiters and self._fits(need):
                self._charge(need)
                ticket.admitted = True
            else:
                self.waiters.append(ticket)
            value = self.in_flight_bytes
        if ticket.admitted:
            self._changed(value)
        return ticket

    def on_completion(self, freed: int, latency: int | None = None) -> list[Ticket]:
        """Return ``freed`` (already fragment-rounded) bytes; wake waiters FIFO."""
        woken: list[Ticket] = []
        with self._lock:
            if freed > self.in_flight_bytes:
                raise SimulationError(f"regulator underflow: freeing {freed} of {self.in_flight_bytes}")
            self.in_flight_bytes -= freed
            if self.hook is not None:
                new_window = self.hook(self.in_flight_bytes, self.window_bytes, latency)
                if new_window is not None:
                    if new_window < self.fragment_bytes:
                        raise AdmissionError("hook returned a window smaller than one fragment")
                    self.window_bytes = int(new_window)
            while self.waiters and self._fits(self.waiters[0].need):
                ticket = self.waiters.popleft()
                self._charge(ticket.need)
                ticket.admitted = True
                woken.append(ticket)
            value = self.in_flight_bytes
        self._changed(value)
        for ticket in woken:
            ticket.notify()
        return woken

    def _changed(self, value: int) -> None:
        if self._on_change is not None:
            self._on_change(value)

    # -- real-thread blocking ---------------------------------------------
    def wait_blocking(self, nbytes: int, timeout: float | None = None) -> int:
        """Block the calling thread until admitted; returns the charged bytes."""
        ticket = self.enqueue(nbytes, threading.Event())
        if not ticket.admitted:
            if not ticket.wake.wait(timeout):
                raise TimeoutError("regulator wait timed out")
        return ticket.need


def pacer_blocking(sim: Simulator, regulator: TrafficRegulator, nbytes: int) -> Generator[Any, Any, int]:
    """Simulated blocking admission; returns the fragment-rounded charge."""
    ticket = regulator.enqueue(nbytes, Signal(sim))
    if not ticket.admitted:
        yield ticket.wake
    return ticket.need
