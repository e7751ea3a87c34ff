"""Size-class pool allocator for agent and behavior records.

Layout
------
Memory comes in blocks of exponentially growing size.  Each block is cut
into ``2**aligned_pages_shift`` page aligned segments; the first word of a
segment holds the id of the owning domain pool, so ``free`` finds its pool
by masking the address.  Segments are initialized lazily, one at a time.

Free slots form intrusive singly linked lists.  A list is a chain of
batches; the first node of each batch stores (next batch, batch tail,
batch size), which lets a whole batch move between a thread-private list
and the central list in O(1)::

    word 0  next node
    word 1  first node of the next batch   (batch heads only)
    word 2  last node of this batch        (batch heads only)
    word 3  nodes in this batch            (batch heads only)

Only the head batch of a private list can be partial, so detaching the
second batch always moves a full one.

All hot paths are ``nogil`` numba functions operating on one int64 state
table per :class:`MemoryManager`; the Python classes are thin views.
"""

from __future__ import annotations

import math
import mmap
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._mem import (
    load_i64,
    spin_lock,
    spin_unlock,
    store_i64,
    sys_free,
    sys_malloc,
)

METADATA_SIZE = 8
MIN_ELEMENT_SIZE = 32
MAX_THREADS = 64
POISON = 0x5A5A_DEAD_BEEF_5A5A

# per-pool row of the state table
P_ELEM = 0
P_LOCK = 1
P_CENTRAL = 2
P_CENTRAL_N = 3
P_CENTRAL_B = 4
P_BLOCK_END = 5
P_WATERMARK = 6
P_NEXT_BLOCK = 7
P_NBLOCKS = 8
P_NSEGS = 9
P_CAPACITY = 10
P_SLOTS_PER_SEG = 11
P_BATCH = 12
P_THRESH_NODES = 13
P_DOMAIN = 14
P_MIGRATIONS = 15
P_CENTRAL_POPS = 16
P_SYSTEM = 17
P_CUR_BLOCK = 18
P_OOM = 19
T0 = 32
TS = 6
T_HEAD = 0
T_COUNT = 1
T_ALLOCS = 2
T_FREES = 3
T_OPS = 4
T_MAX_OPS = 5
ROW = T0 + TS * MAX_THREADS

# global parameters
G_SEG = 0
G_LOCK = 1
G_NBLOCKS = 2
G_DEBUG = 3
G_GROWTH_PPM = 4
G_MAXBLOCKS = 5
G_PAGE = 6
G_WORDS = 8

# block table columns
BL_RAW = 0
BL_RAW_SIZE = 1
BL_START = 2
BL_SIZE = 3
BL_PID = 4
BL_SEGS = 5
BL_WORDS = 6

KIND_POOL = 0
KIND_SYSTEM = 1


class AllocatorError(RuntimeError):
    pass


class DoubleFreeError(AllocatorError):
    pass


# ---------------------------------------------------------------------------
# list primitives


@njit(nogil=True, cache=True)
def _push(st, pid, base, addr):
    head = st[pid, base + T_HEAD]
    if head != 0 and load_i64(head + 24) < st[pid, P_BATCH]:
        store_i64(addr, head)
        store_i64(addr + 8, load_i64(head + 8))
        store_i64(addr + 16, load_i64(head + 16))
        store_i64(addr + 24, load_i64(head + 24) + 1)
    else:
        store_i64(addr, head)
        store_i64(addr + 8, head)
        store_i64(addr + 16, addr)
        store_i64(addr + 24, 1)
    st[pid, base + T_HEAD] = addr
    st[pid, base + T_COUNT] += 1


@njit(nogil=True, cache=True)
def _pop(st, pid, base):
    node = st[pid, base + T_HEAD]
    if node == 0:
        return 0
    nxt = load_i64(node)
    cnt = load_i64(node + 24)
    if cnt > 1:
        store_i64(nxt + 8, load_i64(node + 8))
        store_i64(nxt + 16, load_i64(node + 16))
        store_i64(nxt + 24, cnt - 1)
    st[pid, base + T_HEAD] = nxt
    st[pid, base + T_COUNT] -= 1
    return node


@njit(nogil=True, cache=True)
def _migrate_second_batch(st, pid, base):
    """Move the second batch of a private list to the central list.  Caller holds the lock."""
    head = st[pid, base + T_HEAD]
    second = load_i64(head + 8)
    if second == 0:
        return 0
    third = load_i64(second + 8)
    stail = load_i64(second + 16)
    scnt = load_i64(second + 24)
    store_i64(load_i64(head + 16), third)
    store_i64(head + 8, third)
    store_i64(stail, 0)
    st[pid, base + T_COUNT] -= scnt
    store_i64(second + 8, st[pid, P_CENTRAL])
    st[pid, P_CENTRAL] = second
    st[pid, P_CENTRAL_N] += scnt
    st[pid, P_CENTRAL_B] += 1
    st[pid, P_MIGRATIONS] += 1
    return scnt


@njit(nogil=True, cache=True)
def _splice_central(st, pid, base):
    """Move one central batch into an empty private list.  Caller holds the lock."""
    start = st[pid, P_CENTRAL]
    if start == 0:
        return 0
    cnt = load_i64(start + 24)
    st[pid, P_CENTRAL] = load_i64(start + 8)
    st[pid, P_CENTRAL_N] -= cnt
    st[pid, P_CENTRAL_B] -= 1
    st[pid, P_CENTRAL_POPS] += 1
    store_i64(start + 8, 0)
    st[pid, base + T_HEAD] = start
    st[pid, base + T_COUNT] = cnt
    return cnt


@njit(nogil=True, cache=True)
def _new_block(st, bl, g, pid):
    """Allocate the next block of the pool.  Caller holds the pool lock."""
    seg = g[G_SEG]
    size = st[pid, P_NEXT_BLOCK]
    raw = sys_malloc(size + seg)
    if raw == 0:
        return 0
    start = (raw + seg - 1) & ~(seg - 1)
    flat = g.reshape(-1)
    spin_lock(flat, G_LOCK)
    row = g[G_NBLOCKS]
    if row >= g[G_MAXBLOCKS]:
        spin_unlock(flat, G_LOCK)
        sys_free(raw)
        return 0
    g[G_NBLOCKS] = row + 1
    spin_unlock(flat, G_LOCK)
    bl[row, BL_RAW] = raw
    bl[row, BL_RAW_SIZE] = size + seg
    bl[row, BL_START] = start
    bl[row, BL_SIZE] = size
    bl[row, BL_PID] = pid
    bl[row, BL_SEGS] = 0
    nseg = size // seg
    st[pid, P_CUR_BLOCK] = row
    st[pid, P_WATERMARK] = start
    st[pid, P_BLOCK_END] = start + size
    st[pid, P_NBLOCKS] += 1
    st[pid, P_CAPACITY] += nseg * st[pid, P_SLOTS_PER_SEG]
    grown = int(math.ceil(nseg * (g[G_GROWTH_PPM] / 1e6)))
    if grown <= nseg:
        grown = nseg + 1
    st[pid, P_NEXT_BLOCK] = grown * seg
    return start


@njit(nogil=True, cache=True)
def _refill(st, bl, g, pid, base):
    """Refill an empty private list from the central list, a fresh segment or a new block."""
    flat = st.reshape(-1)
    lock = pid * ROW + P_LOCK
    spin_lock(flat, lock)
    if _splice_central(st, pid, base) > 0:
        spin_unlock(flat, lock)
        return True
    seg = g[G_SEG]
    if st[pid, P_WATERMARK] + seg > st[pid, P_BLOCK_END]:
        if _new_block(st, bl, g, pid) == 0:
            st[pid, P_OOM] += 1
            spin_unlock(flat, lock)
            return False
    seg_start = st[pid, P_WATERMARK]
    st[pid, P_WATERMARK] = seg_start + seg
    st[pid, P_NSEGS] += 1
    bl[st[pid, P_CUR_BLOCK], BL_SEGS] += 1
    spin_unlock(flat, lock)
    store_i64(seg_start, pid)
    elem = st[pid, P_ELEM]
    nslots = st[pid, P_SLOTS_PER_SEG]
    for k in range(nslots - 1, -1, -1):
        _push(st, pid, base, seg_start + METADATA_SIZE + k * elem)
    if st[pid, base + T_COUNT] > st[pid, P_THRESH_NODES]:
        # surplus of a fresh segment goes central now, so later frees migrate at most one batch
        spin_lock(flat, lock)
        while st[pid, base + T_COUNT] > st[pid, P_THRESH_NODES]:
            if _migrate_second_batch(st, pid, base) == 0:
                break
        spin_unlock(flat, lock)
    return True


# ---------------------------------------------------------------------------
# allocation entry points


@njit(nogil=True, cache=True)
def pool_alloc(st, bl, g, pid, tid):
    base = T0 + TS * tid
    addr = _pop(st, pid, base)
    ops = 1
    if addr == 0:
        if not _refill(st, bl, g, pid, base):
            return 0
        addr = _pop(st, pid, base)
        ops += 2
    st[pid, base + T_ALLOCS] += 1
    st[pid, base + T_OPS] += ops
    if ops > st[pid, base + T_MAX_OPS]:
        st[pid, base + T_MAX_OPS] = ops
    if g[G_DEBUG] != 0 and st[pid, P_ELEM] >= 40:
        store_i64(addr + 32, 0)
    return addr


@njit(nogil=True, cache=True)
def pool_free(st, bl, g, addr, tid):
    """Return ``addr`` to the calling thread's private list; -1 on a detected double free."""
    seg = g[G_SEG]
    pid = load_i64(addr & ~(seg - 1))
    base = T0 + TS * tid
    if g[G_DEBUG] != 0 and st[pid, P_ELEM] >= 40:
        if load_i64(addr + 32) == POISON:
            return -1
        store_i64(addr + 32, POISON)
    _push(st, pid, base, addr)
    st[pid, base + T_FREES] += 1
    ops = 1
    if st[pid, base + T_COUNT] > st[pid, P_THRESH_NODES]:
        flat = st.reshape(-1)
        lock = pid * ROW + P_LOCK
        spin_lock(flat, lock)
        while st[pid, base + T_COUNT] > st[pid, P_THRESH_NODES]:
            if _migrate_second_batch(st, pid, base) == 0:
                break
            ops += 1
        spin_unlock(flat, lock)
    st[pid, base + T_OPS] += ops
    if ops > st[pid, base + T_MAX_OPS]:
        st[pid, base + T_MAX_OPS] = ops
    return pid


@njit(nogil=True, cache=True)
def mm_alloc(kind, st, bl, g, pid, tid):
    """Allocate one element of pool ``pid``; 0 when out of memory."""
    if kind == KIND_SYSTEM or st[pid, P_SYSTEM] != 0:
        st[pid, T0 + TS * tid + T_ALLOCS] += 1
        return sys_malloc(st[pid, P_ELEM])
    return pool_alloc(st, bl, g, pid, tid)


@njit(nogil=True, cache=True)
def mm_free(kind, st, bl, g, addr, pid, tid):
    if kind == KIND_SYSTEM or st[pid, P_SYSTEM] != 0:
        st[pid, T0 + TS * tid + T_FREES] += 1
        sys_free(addr)
        return pid
    return pool_free(st, bl, g, addr, tid)


@njit(nogil=True, cache=True)
def _alloc_many(kind, st, bl, g, pid, tid, out):
    for i in range(out.shape[0]):
        a = mm_alloc(kind, st, bl, g, pid, tid)
        if a == 0:
            return i
        out[i] = a
    return out.shape[0]


@njit(nogil=True, cache=True)
def _free_many(kind, st, bl, g, addrs, pid, tid):
    bad = 0
    for i in range(addrs.shape[0]):
        if mm_free(kind, st, bl, g, addrs[i], pid, tid) < 0:
            bad += 1
    return bad


@njit(cache=True)
def _release_blocks(bl, n):
    for i in range(n):
        if bl[i, BL_RAW] != 0:
            sys_free(bl[i, BL_RAW])
            bl[i, BL_RAW] = 0


# ---------------------------------------------------------------------------
# python surface


@dataclass
class PoolStats:
    blocks: int
    segments_initialized: int
    free_central: int
    free_private: list[int]
    live_count: int
    capacity_slots: int
    uninitialized_slots: int
    migrations: int
    block_waste: list[int] = field(default_factory=list)
    block_segments: list[int] = field(default_factory=list)

    @property
    def free_total(self) -> int:
        return self.free_central + sum(self.free_private)


class DomainPool:
    """One row of the state table: the free lists and blocks of one (size class, domain)."""

    def __init__(self, manager: MemoryManager, pid: int, element_size: int, domain: int):
        self.manager = manager
        self.pid = pid
        self.element_size = element_size
        self.domain = domain

    @property
    def _row(self) -> np.ndarray:
        return self.manager.state[self.pid]

    def private_count(self, tid: int) -> int:
        return int(self._row[T0 + TS * tid + T_COUNT])

    @property
    def central_count(self) -> int:
        return int(self._row[P_CENTRAL_N])

    @property
    def threshold_nodes(self) -> int:
        return int(self._row[P_THRESH_NODES])

    def max_ops_per_call(self) -> int:
        row = self._row
        return int(max(row[T0 + TS * t + T_MAX_OPS] for t in range(MAX_THREADS)))

    def stats(self) -> PoolStats:
        m = self.manager
        row = self._row
        nthreads = m.max_threads
        private = [int(row[T0 + TS * t + T_COUNT]) for t in range(nthreads)]
        allocs = sum(int(row[T0 + TS * t + T_ALLOCS]) for t in range(MAX_THREADS))
        frees = sum(int(row[T0 + TS * t + T_FREES]) for t in range(MAX_THREADS))
        seg = m.segment_size
        slots = int(row[P_SLOTS_PER_SEG])
        uninit = 0
        if row[P_NBLOCKS] > 0:
            uninit = (int(row[P_BLOCK_END]) - int(row[P_WATERMARK])) // seg * slots
        waste, segs = [], []
        nb = int(m.g[G_NBLOCKS])
        for b in range(nb):
            if m.blocks[b, BL_PID] != self.pid:
                continue
            nseg = int(m.blocks[b, BL_SIZE]) // seg
            unusable = int(m.blocks[b, BL_RAW_SIZE] - m.blocks[b, BL_SIZE])
            per_seg = seg - slots * self.element_size
            waste.append(unusable + nseg * per_seg)
            segs.append(nseg)
        return PoolStats(
            blocks=int(row[P_NBLOCKS]),
            segments_initialized=int(row[P_NSEGS]),
            free_central=int(row[P_CENTRAL_N]),
            free_private=private,
            live_count=allocs - frees,
            capacity_slots=int(row[P_CAPACITY]),
            uninitialized_slots=uninit,
            migrations=int(row[P_MIGRATIONS]),
            block_waste=waste,
            block_segments=segs,
        )


class SizeClassPool:
    """All domain pools of one element size."""

    def __init__(self, manager: MemoryManager, element_size: int, pids: list[int], system: bool):
        self.manager = manager
        self.element_size = element_size
        self.system_fallback = system
        self.domains = [DomainPool(manager, pid, element_size, d) for d, pid in enumerate(pids)]
        self.pids = np.asarray(pids, dtype=np.int64)

    def allocate(self, thread: int = 0, domain: int = 0) -> int:
        m = self.manager
        addr = mm_alloc(m.kind_code, m.state, m.blocks, m.g, self.pids[domain], thread)
        if addr == 0:
            raise MemoryError(f"allocation of {self.element_size} bytes failed")
        return int(addr)

    def deallocate(self, addr: int, thread: int = 0) -> None:
        m = self.manager
        pid = self.pids[0]
        if m.kind_code == KIND_SYSTEM or self.system_fallback:
            mm_free(m.kind_code, m.state, m.blocks, m.g, addr, pid, thread)
            return
        if pool_free(m.state, m.blocks, m.g, addr, thread) < 0:
            raise DoubleFreeError(f"double free of {addr:#x}")

    def stats(self, domain: int | None = None) -> PoolStats | list[PoolStats]:
        if domain is None:
            return [d.stats() for d in self.domains]
        return self.domains[domain].stats()


class MemoryManager:
    """Owns the state table, the block table and the size classes of one simulation.

    ``kind='system'`` routes every request to libc ``malloc``/``free`` while
    keeping the same counters, for A/B comparisons.
    """

    def __init__(
        self,
        kind: str = "pool",
        domains: int = 1,
        growth_rate: float = 2.0,
        aligned_pages_shift: int = 5,
        migration_threshold: int = 1 << 20,
        page_size: int = mmap.PAGESIZE,
        max_threads: int = MAX_THREADS,
        max_pools: int = 64,
        max_blocks: int = 1 << 14,
        debug: bool = False,
    ):
        if kind not in ("pool", "system"):
            raise ValueError(f"unknown allocator kind {kind!r}")
        if growth_rate <= 1.0:
            raise ValueError("growth_rate must be > 1")
        if aligned_pages_shift < 0:
            raise ValueError("aligned_pages_shift must be >= 0")
        if max_threads > MAX_THREADS:
            raise ValueError(f"at most {MAX_THREADS} threads")
        self.kind = kind
        self.kind_code = KIND_POOL if kind == "pool" else KIND_SYSTEM
        self.n_domains = domains
        self.growth_rate = growth_rate
        self.aligned_pages_shift = aligned_pages_shift
        self.page_size = page_size
        self.segment_size = page_size << aligned_pages_shift
        self.migration_threshold = migration_threshold
        self.max_threads = max_threads
        self.state = np.zeros((max_pools, ROW), dtype=np.int64)
        self.blocks = np.zeros((max_blocks, BL_WORDS), dtype=np.int64)
        self.g = np.zeros(G_WORDS, dtype=np.int64)
        self.g[G_SEG] = self.segment_size
        self.g[G_DEBUG] = int(debug)
        self.g[G_GROWTH_PPM] = int(round(growth_rate * 1e6))
        self.g[G_MAXBLOCKS] = max_blocks
        self.g[G_PAGE] = page_size
        self._classes: dict[int, SizeClassPool] = {}
        self._next_pid = 0
        self._closed = False

    @property
    def max_element_size(self) -> int:
        return self.segment_size - METADATA_SIZE

    def size_class(self, size: int) -> SizeClassPool:
        size = max(MIN_ELEMENT_SIZE, (size + 7) & ~7)
        pool = self._classes.get(size)
        if pool is None:
            system = size > self.max_element_size
            pids = []
            for d in range(self.n_domains):
                pid = self._next_pid
                if pid >= self.state.shape[0]:
                    raise AllocatorError("too many size classes")
                self._next_pid += 1
                self._init_row(pid, size, d, system)
                pids.append(pid)
            pool = SizeClassPool(self, size, pids, system)
            self._classes[size] = pool
        return pool

    def _init_row(self, pid: int, size: int, domain: int, system: bool) -> None:
        row = self.state[pid]
        row[P_ELEM] = size
        row[P_DOMAIN] = domain
        row[P_SYSTEM] = int(system)
        slots = 0 if system else (self.segment_size - METADATA_SIZE) // size
        row[P_SLOTS_PER_SEG] = slots
        thresh = max(1, self.migration_threshold // size)
        row[P_THRESH_NODES] = thresh
        row[P_BATCH] = max(1, thresh // 4)
        row[P_NEXT_BLOCK] = self.segment_size

    def allocate(self, size: int, tid: int = 0, domain: int = 0) -> int:
        return self.size_class(size).allocate(tid, domain)

    def deallocate(self, addr: int, size: int, tid: int = 0) -> None:
        self.size_class(size).deallocate(addr, tid)

    def deallocate_address(self, addr: int, tid: int = 0) -> int:
        """Free pool memory by address alone; returns the owning pool id."""
        if self.kind_code != KIND_POOL:
            raise AllocatorError("address-only deallocation needs the pool allocator")
        pid = pool_free(self.state, self.blocks, self.g, addr, tid)
        if pid < 0:
            raise DoubleFreeError(f"double free of {addr:#x}")
        return int(pid)

    def alloc_many(self, pool: SizeClassPool, n: int, tid: int = 0, domain: int = 0) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        got = _alloc_many(self.kind_code, self.state, self.blocks, self.g, pool.pids[domain], tid, out)
        if got != n:
            raise MemoryError("allocation failed")
        return out

    def free_many(self, pool: SizeClassPool, addrs: np.ndarray, tid: int = 0) -> None:
        addrs = np.ascontiguousarray(addrs, dtype=np.int64)
        bad = _free_many(self.kind_code, self.state, self.blocks, self.g, addrs, pool.pids[0], tid)
        if bad:
            raise DoubleFreeError(f"{bad} double frees")

    def kernel_args(self):
        """Arguments numba kernels pass to :func:`mm_alloc` / :func:`mm_free`."""
        return self.kind_code, self.state, self.blocks, self.g

    def pool_of(self, pid: int) -> DomainPool:
        for c in self._classes.values():
            for d in c.domains:
                if d.pid == pid:
                    return d
        raise KeyError(pid)

    def reserved_bytes(self) -> int:
        nb = int(self.g[G_NBLOCKS])
        return int(self.blocks[:nb, BL_RAW_SIZE].sum())

    def close(self) -> None:
        if not self._closed:
            _release_blocks(self.blocks, int(self.g[G_NBLOCKS]))
            self._closed = True

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def pool_allocate(pool: SizeClassPool, thread: int = 0, domain: int = 0) -> int:
    return pool.allocate(thread, domain)


def pool_deallocate(manager: MemoryManager, address: int, thread: int = 0) -> int:
    return manager.deallocate_address(address, thread)


def pool_stats(pool: SizeClassPool | DomainPool) -> PoolStats | list[PoolStats]:
    return pool.stats()


def waste_bound(page_size: int, aligned_pages_shift: int, element_size: int) -> int:
    """Upper bound on unusable bytes for a single-segment block."""
    return (page_size << aligned_pages_shift) + element_size + METADATA_SIZE
