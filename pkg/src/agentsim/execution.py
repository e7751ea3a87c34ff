"""Topology-aware parallel iteration.

Each memory domain owns one agent sequence.  The sequences are cut into
equal blocks, blocks are dealt out to the threads of the matching domain,
and idle threads steal whole blocks: first from siblings in their own
domain, then from other domains.  A block is claimed by flipping its claim
flag, so exactly-once execution is auditable from the claim log.
"""

from __future__ import annotations

import glob
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

ENV_THREADS = "AGENTSIM_THREADS"
ENV_DOMAINS = "AGENTSIM_DOMAINS"
DEFAULT_BLOCK_SIZE = 256

OWN = "own"
STEAL_LOCAL = "steal_local"
STEAL_REMOTE = "steal_remote"


@dataclass
class Topology:
    domain_count: int
    threads_per_domain: list[int]
    source: str = "override"
    cpus_per_domain: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if self.domain_count < 1:
            raise ValueError("domain_count must be >= 1")
        if len(self.threads_per_domain) != self.domain_count:
            raise ValueError("threads_per_domain needs one entry per domain")
        if any(t < 1 for t in self.threads_per_domain):
            raise ValueError("every domain needs at least one thread")

    @property
    def thread_count(self) -> int:
        return sum(self.threads_per_domain)

    def worker_domain(self, tid: int) -> int:
        for d, first in enumerate(self.first_thread):
            if tid < first + self.threads_per_domain[d]:
                return d
        raise IndexError(tid)

    @property
    def first_thread(self) -> list[int]:
        return [int(x) for x in np.concatenate([[0], np.cumsum(self.threads_per_domain)[:-1]])]

    def domain_threads(self, domain: int) -> range:
        first = self.first_thread[domain]
        return range(first, first + self.threads_per_domain[domain])

    def domain_of_thread(self) -> list[int]:
        return [d for d, n in enumerate(self.threads_per_domain) for _ in range(n)]


def _parse_cpulist(text: str) -> list[int]:
    cpus: list[int] = []
    for part in text.strip().split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-")
            cpus.extend(range(int(lo), int(hi) + 1))
        else:
            cpus.append(int(part))
    return cpus


def _split(total: int, weights: Sequence[int]) -> list[int]:
    """Split ``total`` into integer parts proportional to ``weights``, each >= 1."""
    n = len(weights)
    if total < n:
        raise ValueError(f"{total} threads cannot cover {n} domains")
    w = np.asarray(weights, dtype=float)
    raw = w / w.sum() * total
    parts = np.maximum(1, np.floor(raw).astype(int))
    while parts.sum() < total:
        parts[np.argmax(raw - parts)] += 1
    while parts.sum() > total:
        parts[np.argmax(np.where(parts > 1, parts - raw, -np.inf))] -= 1
    return [int(p) for p in parts]


def detect_topology(
    thread_count: int | None = None,
    domain_count: int | None = None,
    threads_per_domain: Sequence[int] | None = None,
    sysfs_root: str = "/sys/devices/system/node",
) -> Topology:
    """Return the memory-domain layout; never fails, falls back to one domain."""
    if thread_count is None and os.environ.get(ENV_THREADS):
        thread_count = int(os.environ[ENV_THREADS])
    if domain_count is None and os.environ.get(ENV_DOMAINS):
        domain_count = int(os.environ[ENV_DOMAINS])
    if threads_per_domain is not None:
        tpd = [int(t) for t in threads_per_domain]
        return Topology(len(tpd), tpd, "override")

    try:
        allowed = set(os.sched_getaffinity(0))
    except (AttributeError, OSError):
        allowed = set(range(os.cpu_count() or 1))

    if domain_count is not None:
        threads = thread_count or len(allowed)
        return Topology(domain_count, _split(max(threads, domain_count), [1] * domain_count), "override")

    nodes = []
    for path in sorted(glob.glob(os.path.join(sysfs_root, "node[0-9]*"))):
        try:
            with open(os.path.join(path, "cpulist")) as fh:
                cpus = [c for c in _parse_cpulist(fh.read()) if c in allowed]
        except (OSError, ValueError):
            continue
        if cpus:
            nodes.append(cpus)
    if not nodes:
        threads = thread_count or len(allowed)
        return Topology(1, [threads], "single_domain_fallback")

    threads = thread_count or sum(len(c) for c in nodes)
    if threads < len(nodes):
        nodes = [sorted(c for n in nodes for c in n)]
    tpd = _split(threads, [len(c) for c in nodes])
    return Topology(len(nodes), tpd, "os_introspection", nodes)


class WorkerPool:
    """Fixed pool of workers executing parallel regions.

    The calling thread acts as worker 0.  ``run(fn)`` calls ``fn(tid)`` on
    every worker and returns after all of them finished (the region's end
    barrier).
    """

    def __init__(self, topology: Topology, bind: bool = True):
        self.topology = topology
        self.size = topology.thread_count
        self._fn: Callable[[int], None] | None = None
        self._errors: list[BaseException | None] = [None] * self.size
        self._stop = False
        self._threads: list[threading.Thread] = []
        if self.size > 1:
            self._start = threading.Barrier(self.size)
            self._end = threading.Barrier(self.size)
            for tid in range(1, self.size):
                t = threading.Thread(target=self._loop, args=(tid, bind), daemon=True, name=f"agentsim-{tid}")
                t.start()
                self._threads.append(t)

    def _bind(self, tid: int) -> None:
        topo = self.topology
        if topo.source != "os_introspection" or not topo.cpus_per_domain:
            return
        try:
            os.sched_setaffinity(0, topo.cpus_per_domain[topo.worker_domain(tid)])
        except (AttributeError, OSError):
            pass

    def _loop(self, tid: int, bind: bool) -> None:
        if bind:
            self._bind(tid)
        while True:
            self._start.wait()
            if self._stop:
                return
            try:
                self._fn(tid)
            except BaseException as exc:  # reported by run()
                self._errors[tid] = exc
            self._end.wait()

    def run(self, fn: Callable[[int], None]) -> None:
        if self._stop:
            raise RuntimeError("worker pool is closed")
        if self.size == 1:
            fn(0)
            return
        self._fn = fn
        self._errors = [None] * self.size
        self._start.wait()
        try:
            fn(0)
        except BaseException as exc:
            self._errors[0] = exc
        self._end.wait()
        self._fn = None
        errors = [e for e in self._errors if e is not None]
        if errors:
            raise errors[0]

    def chunks(self, n: int) -> list[tuple[int, int]]:
        """Split ``range(n)`` into one contiguous chunk per worker."""
        bounds = np.linspace(0, n, self.size + 1).astype(np.int64)
        return [(int(bounds[i]), int(bounds[i + 1])) for i in range(self.size)]

    def close(self) -> None:
        if self._stop or self.size == 1:
            self._stop = True
            return
        self._stop = True
        self._start.wait()
        for t in self._threads:
            t.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class BlockPartition:
    block_size: int
    blocks: np.ndarray  # (n, 3): domain, start, end
    thread_ranges: list[tuple[int, int]]  # block ids owned by each thread
    domain_ranges: list[tuple[int, int]]

    @classmethod
    def build(cls, domain_sizes: Sequence[int], topology: Topology, block_size: int) -> BlockPartition:
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        rows = []
        thread_ranges: list[tuple[int, int]] = [(0, 0)] * topology.thread_count
        domain_ranges = []
        for d, size in enumerate(domain_sizes):
            first = len(rows)
            for start in range(0, int(size), block_size):
                rows.append((d, start, min(start + block_size, int(size))))
            last = len(rows)
            domain_ranges.append((first, last))
            tids = topology.domain_threads(d)
            cuts = np.linspace(first, last, len(tids) + 1).astype(int)
            for k, tid in enumerate(tids):
                thread_ranges[tid] = (int(cuts[k]), int(cuts[k + 1]))
        blocks = np.array(rows, dtype=np.int64).reshape(-1, 3)
        return cls(block_size, blocks, thread_ranges, domain_ranges)

    @property
    def n_blocks(self) -> int:
        return self.blocks.shape[0]


@dataclass
class ClaimEvent:
    seq: int
    tid: int
    block: int
    kind: str
    home_unclaimed: int  # unclaimed blocks in the claimer's domain when it claimed


@dataclass
class LoopStats:
    blocks: int = 0
    own: int = 0
    steals_local: int = 0
    steals_remote: int = 0
    claim_log: list[ClaimEvent] | None = None
    exit_seq: dict[int, int] = field(default_factory=dict)


class BlockLoopError(RuntimeError):
    def __init__(self, errors: list[tuple[int, BaseException]]):
        self.errors = errors
        block, first = errors[0]
        super().__init__(f"{len(errors)} block(s) failed; first in block {block}: {first!r}")


def for_each_block_parallel(
    pool: WorkerPool,
    domain_sizes: Sequence[int],
    block_fn: Callable[[int, int, int, int], None],
    block_size: int = DEFAULT_BLOCK_SIZE,
    audit: bool = False,
) -> LoopStats:
    """Call ``block_fn(tid, domain, start, end)`` exactly once for every block."""
    topo = pool.topology
    part = BlockPartition.build(domain_sizes, topo, block_size)
    nb = part.n_blocks
    stats = LoopStats(blocks=nb, claim_log=[] if audit else None)
    if nb == 0:
        return stats
    claimed = bytearray(nb)
    block_domain = part.blocks[:, 0].tolist()
    unclaimed = [hi - lo for lo, hi in part.domain_ranges]
    thread_domain = topo.domain_of_thread()
    lock = threading.Lock()
    seq = [0]
    errors: list[tuple[int, BaseException]] = []
    blocks = part.blocks.tolist()

    def claim(b: int, tid: int, kind: str) -> bool:
        with lock:
            if claimed[b]:
                return False
            claimed[b] = 1
            unclaimed[block_domain[b]] -= 1
            if audit:
                stats.claim_log.append(ClaimEvent(seq[0], tid, b, kind, unclaimed[thread_domain[tid]]))
                seq[0] += 1
            if kind == OWN:
                stats.own += 1
            elif kind == STEAL_LOCAL:
                stats.steals_local += 1
            else:
                stats.steals_remote += 1
        return True

    def execute(tid: int, b: int) -> None:
        d, start, end = blocks[b]
        try:
            block_fn(tid, d, start, end)
        except Exception as exc:
            with lock:
                errors.append((b, exc))

    def worker(tid: int) -> None:
        home = thread_domain[tid]
        lo, hi = part.thread_ranges[tid]
        for b in range(lo, hi):
            if claim(b, tid, OWN):
                execute(tid, b)
        siblings = list(topo.domain_threads(home))
        k = siblings.index(tid)
        for victim in siblings[k + 1:] + siblings[:k]:
            vlo, vhi = part.thread_ranges[victim]
            for b in range(vhi - 1, vlo - 1, -1):
                if not claimed[b] and claim(b, tid, STEAL_LOCAL):
                    execute(tid, b)
        nd = topo.domain_count
        for step in range(1, nd):
            dlo, dhi = part.domain_ranges[(home + step) % nd]
            for b in range(dhi - 1, dlo - 1, -1):
                if not claimed[b] and claim(b, tid, STEAL_REMOTE):
                    execute(tid, b)
        if audit:
            with lock:
                stats.exit_seq[tid] = seq[0]
                seq[0] += 1

    pool.run(worker)
    if errors:
        errors.sort(key=lambda e: e[0])
        raise BlockLoopError(errors)
    return stats
