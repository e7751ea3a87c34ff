"""Morton order sorting and load balancing of agents.

Grids are rarely power-of-two cubes, so consecutive in-space boxes have
gaps in their Morton codes.  :func:`build_offsets_table` finds the gaps with
a depth-first walk of the implicit 2^d-ary tree over the enclosing
power-of-two cube.  It descends only into nodes that are partly inside the
grid, so the table is built without enumerating every box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from ._mem import copy_words, load_i64, store_i64
from .alloc import mm_alloc, mm_free
from .commit import parallel_prefix_sum
from .layout import AGENT_WORDS, BEH, BEHAVIOR_WORDS, NBEH, UID

AXIS_BITS = {2: 31, 3: 21}


# bit interleaving


@njit(nogil=True, cache=True)
def _spread3(v):
    v &= 0x1FFFFF
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


@njit(nogil=True, cache=True)
def _compact3(v):
    v &= 0x1249249249249249
    v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3
    v = (v ^ (v >> 4)) & 0x100F00F00F00F00F
    v = (v ^ (v >> 8)) & 0x1F0000FF0000FF
    v = (v ^ (v >> 16)) & 0x1F00000000FFFF
    v = (v ^ (v >> 32)) & 0x1FFFFF
    return v


@njit(nogil=True, cache=True)
def _spread2(v):
    v &= 0x7FFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


@njit(nogil=True, cache=True)
def _compact2(v):
    v &= 0x5555555555555555
    v = (v ^ (v >> 1)) & 0x3333333333333333
    v = (v ^ (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v ^ (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v ^ (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v ^ (v >> 16)) & 0x7FFFFFFF
    return v


@njit(nogil=True, cache=True)
def encode3(x, y, z):
    return _spread3(np.int64(x)) | (_spread3(np.int64(y)) << 1) | (_spread3(np.int64(z)) << 2)


@njit(nogil=True, cache=True)
def decode3(code):
    return _compact3(code), _compact3(code >> 1), _compact3(code >> 2)


@njit(nogil=True, cache=True)
def encode2(x, y):
    return _spread2(np.int64(x)) | (_spread2(np.int64(y)) << 1)


@njit(nogil=True, cache=True)
def decode2(code):
    return _compact2(code), _compact2(code >> 1)


def morton_encode(coords) -> int:
    coords = [int(c) for c in coords]
    d = len(coords)
    if d not in AXIS_BITS:
        raise ValueError("Morton codes are defined for 2 or 3 coordinates")
    limit = 1 << AXIS_BITS[d]
    for c in coords:
        if not 0 <= c < limit:
            raise ValueError(f"coordinate {c} outside [0, 2^{AXIS_BITS[d]})")
    return int(encode3(*coords)) if d == 3 else int(encode2(*coords))


def morton_decode(code: int, dims: int = 3) -> tuple[int, ...]:
    if dims not in AXIS_BITS:
        raise ValueError("Morton codes are defined for 2 or 3 coordinates")
    if not 0 <= code < (1 << (dims * AXIS_BITS[dims])):
        raise ValueError(f"code {code} out of range")
    out = decode3(np.int64(code)) if dims == 3 else decode2(np.int64(code))
    return tuple(int(c) for c in out)


def naive_morton(coords) -> int:
    """Per-bit interleaving loop (test oracle)."""
    d = len(coords)
    code = 0
    for bit in range(AXIS_BITS[d]):
        for ax, c in enumerate(coords):
            code |= ((int(c) >> bit) & 1) << (d * bit + ax)
    return code


# offsets table


@dataclass
class OffsetsTable:
    dims: tuple[int, ...]
    entries: np.ndarray  # (k, 2): box_counter, offset
    in_space: int

    def __len__(self) -> int:
        return self.entries.shape[0]

    def as_list(self) -> list[tuple[int, int]]:
        return [(int(a), int(b)) for a, b in self.entries]


@njit(cache=True)
def _offsets(dims, side):
    d = dims.shape[0]
    fan = 1 << d
    full = side**d
    # stack of (level side, corner...) rows; depth * (fan - 1) + 1 entries suffice
    depth = 1
    s = side
    while s > 1:
        s >>= 1
        depth += 1
    stack = np.zeros((depth * fan + 1, d + 1), dtype=np.int64)
    stack[0, 0] = side
    top = 1
    entries = np.zeros((16, 2), dtype=np.int64)
    ne = 0
    box_counter = 0
    offset = 0
    found_gap = True
    while top > 0:
        top -= 1
        w = stack[top, 0]
        inside = 1
        for ax in range(d):
            span = dims[ax] - stack[top, 1 + ax]
            inside *= min(max(span, 0), w)
        leaves = w**d
        if inside == 0:
            offset += leaves
            found_gap = True
            continue
        if inside == leaves:
            if found_gap:
                if ne == entries.shape[0]:
                    grown = np.zeros((2 * ne, 2), dtype=np.int64)
                    grown[:ne] = entries
                    entries = grown
                entries[ne, 0] = box_counter
                entries[ne, 1] = offset
                ne += 1
                found_gap = False
            box_counter += inside
            continue
        h = w >> 1
        corner = stack[top].copy()
        # push in reverse so child 0 is visited first
        for c in range(fan - 1, -1, -1):
            stack[top, 0] = h
            for ax in range(d):
                stack[top, 1 + ax] = corner[1 + ax] + ((c >> ax) & 1) * h
            top += 1
    assert full >= box_counter
    return entries[:ne].copy(), box_counter


def _pow2_side(dims) -> int:
    side = 1
    while side < max(dims):
        side <<= 1
    return side


def build_offsets_table(dims) -> OffsetsTable:
    dims = tuple(int(x) for x in dims)
    if len(dims) not in AXIS_BITS or any(x < 1 for x in dims):
        raise ValueError("dims must have 2 or 3 positive entries")
    entries, n = _offsets(np.asarray(dims, dtype=np.int64), _pow2_side(dims))
    return OffsetsTable(dims, entries, int(n))


def brute_force_offsets(dims) -> OffsetsTable:
    """Enumerate every in-space box, sort by Morton code and record where gaps occur."""
    dims = tuple(int(x) for x in dims)
    codes = sorted(naive_morton(c) for c in np.ndindex(*dims))
    entries = []
    prev = None
    for rank, code in enumerate(codes):
        off = code - rank
        if off != prev:
            entries.append((rank, off))
            prev = off
    return OffsetsTable(dims, np.array(entries, dtype=np.int64).reshape(-1, 2), len(codes))


def gaps(table: OffsetsTable) -> list[tuple[int, int]]:
    """(code before gap, code after gap) pairs, e.g. (4, 6) when code 5 is out of space."""
    out = []
    for (bc, off), (_, prev_off) in zip(table.entries[1:], table.entries[:-1]):
        out.append((int(bc - 1 + prev_off), int(bc + off)))
    return out


def rank_to_morton(table: OffsetsTable, rank: int) -> int:
    if not 0 <= rank < table.in_space:
        raise IndexError(f"rank {rank} outside [0, {table.in_space})")
    k = int(np.searchsorted(table.entries[:, 0], rank, side="right") - 1)
    return int(rank + table.entries[k, 1])


@njit(nogil=True, cache=True)
def _box_order_chunk(entries, dims, lo, hi, out):
    """Flat box index of each in-space Morton rank in [lo, hi), with a moving table cursor."""
    k = np.searchsorted(entries[:, 0], lo, side="right") - 1
    ne = entries.shape[0]
    dx = dims[0]
    dy = dims[1]
    for r in range(lo, hi):
        while k + 1 < ne and entries[k + 1, 0] <= r:
            k += 1
        x, y, z = decode3(r + entries[k, 1])
        out[r] = (z * dy + y) * dx + x


def morton_box_order(table: OffsetsTable, pool=None) -> np.ndarray:
    n = table.in_space
    out = np.empty(n, dtype=np.int64)
    dims = np.asarray(table.dims, dtype=np.int64)
    chunks = pool.chunks(n) if pool is not None else [(0, n)]

    def work(t: int) -> None:
        lo, hi = chunks[t]
        if hi > lo:
            _box_order_chunk(table.entries, dims, lo, hi, out)

    if pool is not None:
        pool.run(work)
    else:
        work(0)
    return out


# sort and balance


@dataclass
class SortPlan:
    box_order: np.ndarray
    counts: np.ndarray
    prefix: np.ndarray
    domain_bounds: np.ndarray  # agent offsets in sorted order, one more than domains
    thread_ranges: list[tuple[int, int, int]]  # (domain, start, end) in sorted order
    extra_memory: bool

    def domain_share(self, d: int) -> int:
        return int(self.domain_bounds[d + 1] - self.domain_bounds[d])


@njit(nogil=True, cache=True)
def _gather_counts(boxes, ts, order, lo, hi, counts):
    for r in range(lo, hi):
        b = order[r]
        counts[r] = boxes[b, 1] if boxes[b, 2] == ts else 0


@njit(nogil=True, cache=True)
def _copy_range(s, e, dom_start, dst, order, prefix, counts, boxes, succ, offsets, flat_addr, kind, st, bl, g, apid,
                bpid, tid, free_now, uid_index, uid_domain, dom):
    """Copy agents s..e of the Morton sequence into ``dst``; records are reallocated."""
    if e <= s:
        return
    r = np.searchsorted(prefix, s, side="right") - 1
    skip = s - prefix[r]
    w = boxes[order[r], 0]
    for _ in range(skip):
        w = succ[offsets[w >> 32] + (w & 0xFFFFFFFF)]
    left = counts[r] - skip
    for j in range(s, e):
        while left == 0:
            r += 1
            w = boxes[order[r], 0]
            left = counts[r]
        flat = offsets[w >> 32] + (w & 0xFFFFFFFF)
        old = flat_addr[flat]
        new = mm_alloc(kind, st, bl, g, apid, tid)
        copy_words(new, old, AGENT_WORDS)
        for k in range(load_i64(old + 8 * NBEH)):
            ob = load_i64(old + 8 * (BEH + k))
            nb = mm_alloc(kind, st, bl, g, bpid, tid)
            copy_words(nb, ob, BEHAVIOR_WORDS)
            store_i64(new + 8 * (BEH + k), nb)
            if free_now:
                mm_free(kind, st, bl, g, ob, bpid, tid)
        if free_now:
            mm_free(kind, st, bl, g, old, apid, tid)
        idx = j - dom_start
        dst[idx] = new
        u = load_i64(new + 8 * UID)
        uid_index[u] = idx
        uid_domain[u] = dom
        w = succ[flat]
        left -= 1


@njit(nogil=True, cache=True)
def _free_chunk(flat_addr, lo, hi, kind, st, bl, g, apid, bpid, tid):
    for i in range(lo, hi):
        a = flat_addr[i]
        for k in range(load_i64(a + 8 * NBEH)):
            mm_free(kind, st, bl, g, load_i64(a + 8 * (BEH + k)), bpid, tid)
        mm_free(kind, st, bl, g, a, apid, tid)


def plan_shares(prefix: np.ndarray, counts: np.ndarray, total: int, threads_per_domain) -> np.ndarray:
    """Domain boundaries proportional to thread counts, advanced to the next box edge."""
    tpd = np.asarray(threads_per_domain, dtype=np.int64)
    cum = np.concatenate([[0], np.cumsum(tpd)])
    bounds = np.zeros(len(tpd) + 1, dtype=np.int64)
    bounds[-1] = total
    for d in range(1, len(tpd)):
        target = (total * int(cum[d]) + int(cum[-1]) // 2) // int(cum[-1])
        k = int(np.searchsorted(prefix, target, side="left"))
        edge = int(prefix[k]) if k < prefix.shape[0] else total
        bounds[d] = max(edge, bounds[d - 1])
    return bounds


def sort_and_balance(rm, grid, topology, pool=None, extra_memory: bool = True) -> SortPlan:
    """Reorder all agents along the Morton curve of ``grid`` and rebalance the domains."""
    if grid.built_version != rm.version:
        raise RuntimeError("the grid must be rebuilt before sorting")
    rm._guard()
    if rm.n_domains != topology.domain_count:
        raise ValueError("resource manager and topology disagree on the domain count")
    table = build_offsets_table(tuple(int(x) for x in grid.dims))
    order = morton_box_order(table, pool)
    nbox = order.shape[0]
    counts = np.empty(nbox, dtype=np.int64)
    chunks = pool.chunks(nbox) if pool is not None else [(0, nbox)]
    ts = grid.grid_timestamp

    def gather(t: int) -> None:
        lo, hi = chunks[t]
        _gather_counts(grid.boxes, ts, order, lo, hi, counts)

    _run(pool, gather)
    prefix = parallel_prefix_sum(counts, pool)
    total = rm.size
    bounds = plan_shares(prefix, counts, total, topology.threads_per_domain)
    thread_ranges: list[tuple[int, int, int]] = []
    for d in range(topology.domain_count):
        tids = list(topology.domain_threads(d))
        cuts = np.linspace(bounds[d], bounds[d + 1], len(tids) + 1).astype(np.int64)
        for k in range(len(tids)):
            thread_ranges.append((d, int(cuts[k]), int(cuts[k + 1])))
    flat, offsets = rm.flat_addresses()
    sizes = [int(bounds[d + 1] - bounds[d]) for d in range(rm.n_domains)]
    arrays = [np.zeros(max(16, s), dtype=np.int64) for s in sizes]
    kind, st, bl, g = rm.memory.kernel_args()
    apids = rm.agent_pool.pids
    bpids = rm.behavior_pool.pids

    def copy(t: int) -> None:
        d, s, e = thread_ranges[t]
        _copy_range(s, e, int(bounds[d]), arrays[d], order, prefix, counts, grid.boxes, grid.successors, offsets, flat,
                    kind, st, bl, g, apids[d], bpids[d], t, not extra_memory, rm.uid_index, rm.uid_domain, d)

    _run(pool, copy, len(thread_ranges))
    if extra_memory:
        fchunks = pool.chunks(flat.shape[0]) if pool is not None else [(0, flat.shape[0])]

        def release(t: int) -> None:
            lo, hi = fchunks[t]
            _free_chunk(flat, lo, hi, kind, st, bl, g, apids[0], bpids[0], t)

        _run(pool, release)
    rm._set_domains(arrays, sizes)
    return SortPlan(order, counts, prefix, bounds, thread_ranges, extra_memory)


def _run(pool, fn, n: int = 1) -> None:
    if pool is not None:
        pool.run(fn)
    else:
        for t in range(n):
            fn(t)
