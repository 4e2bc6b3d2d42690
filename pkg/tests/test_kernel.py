import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdmasim.kernel import COUNTERS, WAKEUP, Signal, SimulationError, Simulator
from rdmasim.presets import preset
from rdmasim.scenario import Scenario, report_json


def test_event_at_now_runs_before_later_events():
    sim = Simulator()
    seen = []
    sim.call_at(10, WAKEUP, seen.append, "later")
    sim.call_at(0, WAKEUP, seen.append, "now")
    sim.run()
    assert seen == ["now", "later"]


def test_equal_timestamps_dispatch_in_schedule_order():
    sim = Simulator()
    seen = []
    a = sim.call_at(100, WAKEUP, seen.append, "first")
    b = sim.call_at(100, WAKEUP, seen.append, "second")
    assert a.seq < b.seq
    sim.run()
    assert seen == ["first", "second"]


def test_scheduling_into_the_past_is_rejected():
    sim = Simulator()
    sim.call_at(60, WAKEUP, lambda: sim.call_at(50, WAKEUP, lambda: None))
    with pytest.raises(SimulationError):
        sim.run()


def test_run_until_on_empty_queue_returns_at_once():
    sim = Simulator()
    summary = sim.run_until(1000)
    assert summary.dispatched == 0
    assert summary.clock == 0
    assert summary.quiescent


def test_run_until_leaves_later_events_pending():
    sim = Simulator()
    seen = []
    for t in (10, 20, 30):
        sim.call_at(t, WAKEUP, seen.append, t)
    summary = sim.run_until(20)
    assert seen == [10, 20]
    assert summary.pending == 1
    sim.run()
    assert seen == [10, 20, 30]


def test_cancelled_event_never_fires():
    sim = Simulator()
    seen = []
    ev = sim.call_at(5, WAKEUP, seen.append, "x")
    ev.cancel()
    sim.run()
    assert seen == []


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=200))
def test_clock_is_monotone_and_ties_keep_insertion_order(times):
    sim = Simulator()
    fired = []
    for i, t in enumerate(times):
        sim.call_at(t, WAKEUP, fired.append, (t, i))
    clocks = []
    sim.on_dispatch = lambda s, ev: clocks.append(s.now)
    sim.run()
    assert clocks == sorted(clocks)
    assert fired == sorted(fired)


def test_process_sleeps_and_waits_on_signals():
    sim = Simulator()
    sig = Signal(sim)
    log = []

    def waiter():
        v = yield sig
        log.append(("woke", sim.now, v))

    def firer():
        yield 250
        sig.fire("go")
        log.append(("fired", sim.now))

    sim.process(waiter())
    sim.process(firer())
    sim.run()
    assert log == [("fired", 250), ("woke", 250, "go")]


def test_waiting_on_a_fired_signal_does_not_block():
    sim = Simulator()
    sig = Signal(sim)
    sig.fire(7)
    got = []

    def proc():
        got.append((yield sig))

    sim.process(proc())
    sim.run()
    assert got == [7]


def test_negative_sleep_is_a_contract_violation():
    sim = Simulator()

    def proc():
        yield -1

    sim.process(proc())
    with pytest.raises(SimulationError):
        sim.run()


def test_counters_cannot_decrease_and_completed_never_exceeds_in():
    sim = Simulator()
    m = sim.metrics
    assert set(COUNTERS) <= set(m.counters)
    with pytest.raises(SimulationError):
        m.inc("wqe_posted", -1)
    with pytest.raises(SimulationError):
        m.inc("requests_completed")


def test_gauge_time_mean_and_sampling():
    sim = Simulator()
    g = sim.metrics.gauges["in_flight_bytes"]
    sim.call_at(10, WAKEUP, g.set, 4)
    sim.call_at(30, WAKEUP, g.set, 0)
    sim.run()
    # 4 for 20 of 40 ns
    assert g.time_mean(0, 40) == pytest.approx(2.0)
    assert g.sample(10, 40) == [0, 4, 4, 0, 0]
    assert g.peak == 4


def test_histogram_nearest_rank_percentiles():
    sim = Simulator()
    h = sim.metrics.histograms["request_latency"]
    for v in range(1, 101):
        h.record(v)
    assert h.percentile(50) == 50
    assert h.percentile(99) == 99
    assert h.mean == pytest.approx(50.5)


def test_thousand_requests_are_all_completed():
    cfg = preset("fig5", **{"workload.requests": 1000})
    sc = Scenario(cfg).run()
    assert sc.sim.metrics.counters["requests_in"] == 1000
    assert sc.sim.metrics.counters["requests_completed"] == 1000
    assert sc.summary.quiescent
    assert sc.sim.metrics.gauges["in_flight_ops"].value == 0


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**31))
def test_same_seed_same_report(seed):
    cfg = preset("fig8", seed=seed, peers=4, **{"workload.requests": 400})
    assert report_json(Scenario(cfg).run().report()) == report_json(Scenario(cfg).run().report())
