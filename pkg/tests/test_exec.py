import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentsim.execution import (
    OWN,
    STEAL_LOCAL,
    STEAL_REMOTE,
    BlockLoopError,
    BlockPartition,
    Topology,
    WorkerPool,
    detect_topology,
    for_each_block_parallel,
)


def test_override_single_domain():
    t = detect_topology(thread_count=4, domain_count=1)
    assert (t.domain_count, t.threads_per_domain) == (1, [4])


def test_override_two_domains_thread_mapping():
    t = detect_topology(threads_per_domain=[2, 2])
    assert [t.worker_domain(i) for i in range(4)] == [0, 0, 1, 1]
    assert t.source == "override"


def test_fallback_without_introspection(tmp_path):
    t = detect_topology(thread_count=3, sysfs_root=str(tmp_path / "missing"))
    assert t.source == "single_domain_fallback"
    assert t.threads_per_domain == [3]


def test_environment_variable_overrides_threads(monkeypatch):
    monkeypatch.setenv("AGENTSIM_THREADS", "5")
    assert detect_topology().thread_count == 5
    assert detect_topology(thread_count=2).thread_count == 2


def test_topology_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Topology(2, [1])
    with pytest.raises(ValueError):
        Topology(1, [0])


def test_partition_blocks_cover_domains():
    topo = Topology(2, [2, 1])
    part = BlockPartition.build([1000, 300], topo, 128)
    for d, size in enumerate([1000, 300]):
        rows = part.blocks[part.blocks[:, 0] == d]
        assert rows[0, 1] == 0 and rows[-1, 2] == size
        assert np.all(rows[1:, 1] == rows[:-1, 2])


def test_one_thread_visits_in_sequence_order():
    topo = Topology(1, [1])
    seen = []
    with WorkerPool(topo) as pool:
        for_each_block_parallel(pool, [100], lambda t, d, s, e: seen.extend(range(s, e)), block_size=7)
    assert seen == list(range(100))


def run_counted(topo, sizes, block_size, slow=None):
    counters = [np.zeros(s, dtype=np.int64) for s in sizes]
    lock = threading.Lock()

    def fn(tid, d, s, e):
        if slow is not None and (d, s) == slow:
            time.sleep(0.05)
        with lock:
            counters[d][s:e] += 1

    with WorkerPool(topo) as pool:
        stats = for_each_block_parallel(pool, sizes, fn, block_size, audit=True)
    return counters, stats


def test_cross_domain_stealing_when_one_domain_empty():
    counters, stats = run_counted(Topology(2, [2, 2]), [1000, 0], 16)
    assert np.all(counters[0] == 1)
    remote = [e for e in stats.claim_log if e.kind == STEAL_REMOTE]
    assert all(e.tid in (2, 3) for e in remote)


def test_locality_preference_in_claim_log():
    _, stats = run_counted(Topology(2, [2, 2]), [900, 100], 8, slow=(0, 0))
    log = stats.claim_log
    for e in log:
        if e.kind == STEAL_REMOTE:
            # every same-domain block was claimed before a thread went remote
            assert e.home_unclaimed == 0


def test_adversarial_slow_block_no_idle_worker():
    counters, stats = run_counted(Topology(1, [4]), [2000], 10, slow=(0, 0))
    assert all(np.all(c == 1) for c in counters)
    assert stats.own + stats.steals_local + stats.steals_remote == stats.blocks
    assert stats.steals_local > 0
    # a worker only exits once every block is claimed
    last_claim = max(e.seq for e in stats.claim_log)
    assert all(x > last_claim for x in stats.exit_seq.values())


def test_errors_collected_after_drain():
    hits = np.zeros(100, dtype=np.int64)

    def fn(tid, d, s, e):
        hits[s:e] += 1
        if s == 30:
            raise KeyError("boom")

    with WorkerPool(Topology(1, [3])) as pool:
        with pytest.raises(BlockLoopError) as ei:
            for_each_block_parallel(pool, [100], fn, 10)
    assert isinstance(ei.value.errors[0][1], KeyError)
    assert np.all(hits == 1)


def test_pool_run_reports_worker_errors():
    with WorkerPool(Topology(1, [3])) as pool:
        def fn(tid):
            if tid == 2:
                raise ValueError("x")

        with pytest.raises(ValueError):
            pool.run(fn)
        out = []
        pool.run(lambda tid: out.append(tid))
        assert sorted(out) == [0, 1, 2]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 2000), min_size=1, max_size=3), st.integers(1, 300), st.integers(1, 3))
def test_exactly_once_random(sizes, block, tpd):
    topo = Topology(len(sizes), [tpd] * len(sizes))
    counters, stats = run_counted(topo, sizes, block)
    assert all(np.all(c == 1) for c in counters)
    kinds = {e.kind for e in stats.claim_log}
    assert kinds <= {OWN, STEAL_LOCAL, STEAL_REMOTE}
