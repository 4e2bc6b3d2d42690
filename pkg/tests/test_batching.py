import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdmasim.batching import (
    Adjacency,
    BatchMode,
    BatchPolicy,
    MergeQueue,
    merge_check,
    plan_doorbells,
    plan_runs,
    req_chaining,
    stress,
)
from rdmasim.kernel import SimulationError
from rdmasim.verbs import DataRequest, Direction, MrKind, Space

from rig import KiB, make_batcher, make_rig

W = Direction.WRITE


def req(i, node=0, addr=0, length=4 * KiB):
    return DataRequest(i, W, node, addr, length)


def test_merge_check_examples():
    assert merge_check(req(0, addr=0), req(1, addr=4 * KiB)) is Adjacency.ADJACENT
    assert merge_check(req(0, addr=0), req(1, addr=8 * KiB)) is Adjacency.CHAINABLE
    assert merge_check(req(0, addr=4 * KiB), req(1, addr=0)) is Adjacency.CHAINABLE
    assert merge_check(req(0, node=0), req(1, node=1, addr=4 * KiB)) is Adjacency.UNRELATED


def test_queue_rejects_wrong_direction():
    q = MergeQueue(Direction.READ)
    with pytest.raises(ValueError):
        q.put(req(0))


def test_bounded_queue_refuses_when_full():
    q = MergeQueue(W, capacity=2)
    assert q.put(req(0)) and q.put(req(1))
    assert not q.put(req(2))
    q.get()
    assert q.put(req(2))


def test_req_chaining_links_in_order():
    rig = make_rig()
    wrs = [rig.wr(remote_addr=i * 4 * KiB) for i in range(8)]
    head = req_chaining(wrs)
    seen = []
    while head is not None:
        seen.append(head)
        head = head.chain_next
    assert seen == wrs
    one = rig.wr()
    assert req_chaining([one]) is one and one.chain_next is None
    assert req_chaining([]) is None


def test_req_chaining_refuses_mixed_qps():
    rig = make_rig(nodes=2)
    with pytest.raises(SimulationError):
        req_chaining([rig.wr(node=0), rig.wr(node=1)])


# -- planning oracle -------------------------------------------------------


def runs_oracle(reqs, cap):
    """Per node, merge consecutive requests of that node while contiguous and
    under ``cap``; order runs by their first request."""
    firsts = {}
    for node in {r.node for r in reqs}:
        mine = [(i, r) for i, r in enumerate(reqs) if r.node == node]
        cur = None
        for i, r in mine:
            if cur and cur[-1][1].end == r.remote_addr and sum(x.length for _, x in cur) + r.length <= cap:
                cur.append((i, r))
            else:
                cur = [(i, r)]
                firsts[i] = cur
    return [[r.req_id for _, r in firsts[k]] for k in sorted(firsts)]


request_lists = st.lists(
    st.tuples(st.integers(0, 3), st.integers(0, 12), st.sampled_from([4 * KiB, 8 * KiB, 128 * KiB])),
    max_size=40,
).map(lambda xs: [DataRequest(i, W, n, a * 4 * KiB, ln) for i, (n, a, ln) in enumerate(xs)])


@given(request_lists, st.sampled_from([16 * KiB, 256 * KiB, 1024 * KiB]))
def test_plan_runs_matches_per_node_oracle(reqs, cap):
    policy = BatchPolicy(mode=BatchMode.MERGE, max_merged_bytes=cap)
    got = [[r.req_id for r in run] for run in plan_runs(reqs, policy)]
    assert got == runs_oracle(reqs, cap)


@given(request_lists, st.sampled_from(list(BatchMode)), st.integers(1, 8))
def test_every_request_in_exactly_one_doorbell_in_order(reqs, mode, chain):
    policy = BatchPolicy(mode=mode, max_chaining_size=chain)
    doorbells = plan_doorbells(plan_runs(reqs, policy), policy)
    ids = [r.req_id for d in doorbells for run in d for r in run]
    assert sorted(ids) == [r.req_id for r in reqs]
    for d in doorbells:
        assert len(d) <= chain
        assert len({run[0].node for run in d}) == 1
        for run in d:
            for a, b in zip(run, run[1:]):
                assert merge_check(a, b) is Adjacency.ADJACENT
    # per-node order survives
    for node in {r.node for r in reqs}:
        mine = [i for i in ids if reqs[i].node == node]
        assert mine == sorted(mine)


@given(request_lists, st.integers(1, 8))
def test_modes_agree_on_wqe_counts(reqs, chain):
    def wqes(mode):
        p = BatchPolicy(mode=mode, max_chaining_size=chain)
        return sum(len(d) for d in plan_doorbells(plan_runs(reqs, p), p))

    assert wqes(BatchMode.SINGLE) == wqes(BatchMode.DOORBELL) == len(reqs)
    assert wqes(BatchMode.HYBRID) == wqes(BatchMode.MERGE) <= len(reqs)


@given(request_lists, st.integers(1, 8))
def test_doorbells_per_node_are_ceil_of_runs(reqs, chain):
    p = BatchPolicy(mode=BatchMode.HYBRID, max_chaining_size=chain)
    runs = plan_runs(reqs, p)
    doorbells = plan_doorbells(runs, p)
    for node in {r.node for r in reqs}:
        n_runs = sum(1 for run in runs if run[0].node == node)
        assert sum(1 for d in doorbells if d[0][0].node == node) == math.ceil(n_runs / chain)


# -- simulated batcher -----------------------------------------------------


def submit(rig, b, reqs):
    results = []

    def actor(r):
        results.append((yield from b.req_msg(r)))

    for r in reqs:
        rig.sim.process(actor(r))
    rig.sim.run()
    return results


def submit_together(rig, b, reqs):
    """Queue ``reqs`` before anyone holds the token, then drain once."""
    q = b.queues[W]
    for r in reqs:
        q.put(r)
        rig.sim.metrics.inc("requests_in")
    rig.sim.process(b.merge_and_chain(q))
    rig.sim.run()


def test_token_loser_returns_at_once_and_rides_along():
    rig, b = make_batcher()
    results = submit(rig, b, [req(i, addr=i * 4 * KiB) for i in range(4)])
    batches = [r for r in results if r is not None]
    assert len(batches) == 1
    assert sorted(batches[0].covers) == [0, 1, 2, 3]
    assert rig.counters["requests_completed"] == 4


def test_kernel_auto_merges_into_one_dyn_wr_with_sge_per_request():
    rig, b = make_batcher()
    submit_together(rig, b, [req(i, addr=i * 4 * KiB) for i in range(4)])
    (wr,) = b.batches[0].segments
    assert len(wr.sge_list) == 4
    assert all(s.mr.kind is MrKind.DYN for s in wr.sge_list)
    assert rig.counters["wqe_posted"] == 1


def test_user_small_merge_is_copied_into_one_pool_sge():
    rig, b = make_batcher(space=Space.USER)
    submit_together(rig, b, [req(i, addr=i * 128 * KiB, length=128 * KiB) for i in range(2)])
    (wr,) = b.batches[0].segments
    assert len(wr.sge_list) == 1
    assert wr.sge_list[0].mr.kind is MrKind.PRE
    assert rig.session.mempool.free == rig.session.mempool.slots


def test_hybrid_chains_runs_for_one_node_behind_one_doorbell():
    rig, b = make_batcher(nodes=2)
    reqs = [req(i, node=i % 2, addr=(i // 2) * 8 * KiB) for i in range(8)]
    submit_together(rig, b, reqs)
    c = rig.counters
    # no two requests of a node are adjacent, both nodes get one chain
    assert (c["wqe_posted"], c["mmio_count"], c["dma_read_count"]) == (8, 2, 6)


def test_single_mode_rings_one_doorbell_per_request():
    rig, b = make_batcher(policy=BatchPolicy(mode=BatchMode.SINGLE))
    submit_together(rig, b, [req(i, addr=i * 4 * KiB) for i in range(6)])
    c = rig.counters
    assert (c["wqe_posted"], c["mmio_count"], c["merges"]) == (6, 6, 0)


def test_merging_and_chaining_together_beat_either_alone():
    def mmio_and_wqe(mode):
        rig, b = make_batcher(nodes=2, policy=BatchPolicy(mode=mode))
        # per node: 4 contiguous pairs separated by holes
        reqs = [req(i, node=i % 2, addr=(i // 4) * 12 * KiB + (i // 2) % 2 * 4 * KiB) for i in range(16)]
        submit_together(rig, b, reqs)
        return rig.counters["mmio_count"], rig.counters["wqe_posted"]

    assert mmio_and_wqe(BatchMode.SINGLE) == (16, 16)
    assert mmio_and_wqe(BatchMode.MERGE) == (8, 8)
    assert mmio_and_wqe(BatchMode.DOORBELL) == (2, 16)
    assert mmio_and_wqe(BatchMode.HYBRID) == (2, 8)


def test_window_caps_in_flight_bytes_in_simulation():
    rig, b = make_batcher(window=4 * 128 * KiB)
    submit(rig, b, [req(i, addr=i * 128 * KiB, length=128 * KiB) for i in range(40)])
    assert b.regulator.peak_in_flight <= 4 * 128 * KiB
    assert b.regulator.violations == 0
    assert rig.counters["requests_completed"] == 40
    assert b.regulator.in_flight_bytes == 0


def test_small_threaded_stress_run():
    r = stress(threads=4, operations=20_000)
    assert r.ok
    assert r.delivered == 20_000
    assert r.peak_in_flight <= r.window_bytes
