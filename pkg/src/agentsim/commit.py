"""Staged structural changes and their parallel commit.

Workers never resize the resource manager during the agent loop.  They
record additions and removals in a :class:`ThreadLocalDelta`; after the loop
removals are committed with the five-step swap compaction and additions are
appended into disjoint ranges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from ._mem import atomic_and_addr, atomic_or_addr, load_i64, store_i64
from .layout import FLAGS, REMOVED, UID

SENTINEL = np.iinfo(np.int64).max


# prefix sum


@njit(nogil=True, cache=True)
def _chunk_sum(values, lo, hi):
    s = values.dtype.type(0)
    for i in range(lo, hi):
        s += values[i]
    return s


@njit(nogil=True, cache=True)
def _chunk_scan(values, out, lo, hi, offset):
    acc = offset
    for i in range(lo, hi):
        out[i] = acc
        acc += values[i]


def parallel_prefix_sum(values, pool=None, mode: str = "exclusive") -> np.ndarray:
    """Exclusive (or inclusive) scan computed in three passes over per-worker chunks.

    Pass one sums each chunk, pass two scans the chunk sums, pass three scans
    each chunk from its offset.  Total work is 2n additions.
    """
    if mode not in ("exclusive", "inclusive"):
        raise ValueError(f"unknown scan mode {mode!r}")
    values = np.ascontiguousarray(values)
    n = values.shape[0]
    out = np.empty_like(values)
    if n == 0:
        return out
    chunks = pool.chunks(n) if pool is not None else [(0, n)]
    sums = np.zeros(len(chunks), dtype=values.dtype)

    def reduce(tid: int) -> None:
        lo, hi = chunks[tid]
        sums[tid] = _chunk_sum(values, lo, hi)

    offsets = None

    def scan(tid: int) -> None:
        lo, hi = chunks[tid]
        _chunk_scan(values, out, lo, hi, offsets[tid])

    if pool is not None and pool.size > 1:
        pool.run(reduce)
        offsets = np.concatenate([np.zeros(1, dtype=values.dtype), np.cumsum(sums)[:-1]])
        pool.run(scan)
    else:
        offsets = np.zeros(1, dtype=values.dtype)
        scan(0)
    if mode == "inclusive":
        out += values
    return out


def sequential_prefix_sum(values) -> np.ndarray:
    values = np.asarray(values)
    out = np.empty_like(values)
    acc = values.dtype.type(0)
    for i, v in enumerate(values):
        out[i] = acc
        acc += v
    return out


# staging


class ThreadLocalDelta:
    """One worker's staged additions and removals.

    Additions are fully initialized records (allocated by the staging
    thread) keyed by ``(parent uid, sequence)`` so uids can be assigned in a
    canonical order at commit time.  Removals are packed ``domain << 32 |
    index`` words.
    """

    def __init__(self, capacity: int = 64):
        self.added_addr = np.zeros(capacity, dtype=np.int64)
        self.added_parent = np.zeros(capacity, dtype=np.int64)
        self.added_seq = np.zeros(capacity, dtype=np.int64)
        self.removed_packed = np.zeros(capacity, dtype=np.int64)
        self.n = np.zeros(2, dtype=np.int64)  # added, removed

    @property
    def n_added(self) -> int:
        return int(self.n[0])

    @property
    def n_removed(self) -> int:
        return int(self.n[1])

    def reserve_added(self, extra: int) -> None:
        need = self.n_added + extra
        cap = self.added_addr.shape[0]
        if need > cap:
            new = max(need, 2 * cap)
            for name in ("added_addr", "added_parent", "added_seq"):
                old = getattr(self, name)
                arr = np.zeros(new, dtype=np.int64)
                arr[: old.shape[0]] = old
                setattr(self, name, arr)

    def reserve_removed(self, extra: int) -> None:
        need = self.n_removed + extra
        cap = self.removed_packed.shape[0]
        if need > cap:
            arr = np.zeros(max(need, 2 * cap), dtype=np.int64)
            arr[:cap] = self.removed_packed
            self.removed_packed = arr

    def stage_add(self, address: int, parent_uid: int = -1, seq: int = 0) -> None:
        self.reserve_added(1)
        k = self.n_added
        self.added_addr[k] = address
        self.added_parent[k] = parent_uid
        self.added_seq[k] = seq
        self.n[0] += 1

    def stage_remove(self, handle) -> None:
        self.reserve_removed(1)
        self.removed_packed[self.n_removed] = (int(handle.domain) << 32) | int(handle.index)
        self.n[1] += 1

    @property
    def added(self) -> list[int]:
        return self.added_addr[: self.n_added].tolist()

    @property
    def removed(self) -> list:
        from .core.agent import AgentHandle

        return [AgentHandle(int(w >> 32), int(w & 0xFFFFFFFF)) for w in self.removed_packed[: self.n_removed]]

    def clear(self) -> None:
        self.n[:] = 0


# removals


@dataclass
class RemovalScratch:
    domain: int
    old_size: int
    new_size: int
    to_right: np.ndarray
    to_left: np.ndarray  # the not_to_left array after step 3
    count_right: np.ndarray
    count_left: np.ndarray
    prefix_right: np.ndarray
    prefix_left: np.ndarray
    swaps: int

    @property
    def removed(self) -> int:
        return self.old_size - self.new_size

    @property
    def aux_elements(self) -> int:
        """Elements of the two auxiliary arrays (the per-worker counters excluded)."""
        return int(self.to_right.shape[0] + self.to_left.shape[0])


class CommitError(ValueError):
    pass


@njit(nogil=True, cache=True)
def _mark(idx, addrs, old_size, new_size, to_right, slice_lo, slice_hi, not_to_left, doomed):
    """Step 2 for one worker.  Returns 0, or -1 / -2 for out-of-range / duplicate handles."""
    k = slice_lo
    for j in range(idx.shape[0]):
        i = idx[j]
        if i < 0 or i >= old_size:
            return -1
        a = addrs[i]
        if atomic_or_addr(a + 8 * FLAGS, REMOVED) & REMOVED:
            return -2
        doomed[j] = a
        if i < new_size:
            to_right[k] = i
            k += 1
        else:
            not_to_left[i - new_size] = 1
    for p in range(k, slice_hi):
        to_right[p] = SENTINEL
    return 0


@njit(nogil=True, cache=True)
def _unmark(doomed, n):
    for j in range(n):
        if doomed[j] != 0:
            atomic_and_addr(doomed[j] + 8 * FLAGS, ~REMOVED)


@njit(nogil=True, cache=True)
def _compact(to_right, not_to_left, lo, hi, new_size):
    """Step 3 on one block; returns (right count, left count)."""
    nr = lo
    for p in range(lo, hi):
        v = to_right[p]
        if v != SENTINEL:
            to_right[nr] = v
            nr += 1
    nl = lo
    for p in range(lo, hi):
        if not_to_left[p] == 0:
            not_to_left[nl] = p + new_size
            nl += 1
    return nr - lo, nl - lo


@njit(nogil=True, cache=True)
def _swap_range(g0, g1, to_right, to_left, block_lo, pref_r, pref_l, addrs, uid_index):
    """Step 4: pair ``g0..g1`` of the global pairing; returns moves done."""
    if g1 <= g0:
        return 0
    br = np.searchsorted(pref_r, g0, side="right") - 1
    bl = np.searchsorted(pref_l, g0, side="right") - 1
    nb = pref_r.shape[0]
    for g in range(g0, g1):
        while br + 1 < nb and pref_r[br + 1] <= g:
            br += 1
        while bl + 1 < nb and pref_l[bl + 1] <= g:
            bl += 1
        dst = to_right[block_lo[br] + g - pref_r[br]]
        src = to_left[block_lo[bl] + g - pref_l[bl]]
        a = addrs[src]
        addrs[dst] = a
        uid_index[load_i64(a + 8 * UID)] = dst
    return g1 - g0


@njit(nogil=True, cache=True)
def _forget(doomed, uid_domain):
    for j in range(doomed.shape[0]):
        uid_domain[load_i64(doomed[j] + 8 * UID)] = -1


def _run(pool, fn, n_workers: int) -> None:
    if pool is not None and pool.size > 1:
        size = pool.size

        def strided(tid: int) -> None:
            for t in range(tid, n_workers, size):
                fn(t)

        pool.run(strided)
    else:
        for t in range(n_workers):
            fn(t)


def commit_removals(rm, deltas, pool=None, debug: bool = True) -> list[RemovalScratch]:
    """Remove every staged handle; survivors stay dense.  Returns per-domain scratch."""
    per_worker = [d.removed_packed[: d.n_removed] for d in deltas]
    out: list[RemovalScratch] = []
    for dom in range(rm.n_domains):
        idx = [w[(w >> 32) == dom] & 0xFFFFFFFF for w in per_worker]
        counts = np.array([x.shape[0] for x in idx], dtype=np.int64)
        r = int(counts.sum())
        if r == 0:
            continue
        # step 1
        old_size = rm.domain_size(dom)
        new_size = old_size - r
        if new_size < 0:
            raise CommitError(f"domain {dom}: {r} removals exceed {old_size} agents")
        addrs = rm.domain_array(dom)
        to_right = np.empty(r, dtype=np.int64)
        not_to_left = np.zeros(r, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        doomed = [np.zeros(c, dtype=np.int64) for c in counts]
        status = np.zeros(len(idx), dtype=np.int64)

        # step 2
        def mark(t: int) -> None:
            if t < len(idx):
                status[t] = _mark(idx[t], addrs, old_size, new_size, to_right, starts[t], starts[t + 1],
                                  not_to_left, doomed[t])

        _run(pool, mark, len(idx))
        if status.min() < 0:
            for t in range(len(idx)):
                _unmark(doomed[t], doomed[t].shape[0])
            what = "out-of-range" if -1 in status else "duplicate"
            raise CommitError(f"domain {dom}: {what} handle in staged removals")

        # step 3
        nb = pool.size if pool is not None else 1
        bounds = np.linspace(0, r, nb + 1).astype(np.int64)
        count_r = np.zeros(nb, dtype=np.int64)
        count_l = np.zeros(nb, dtype=np.int64)

        def compact(t: int) -> None:
            count_r[t], count_l[t] = _compact(to_right, not_to_left, bounds[t], bounds[t + 1], new_size)

        _run(pool, compact, nb)

        # step 4
        pref_r = parallel_prefix_sum(count_r, pool)
        pref_l = parallel_prefix_sum(count_l, pool)
        swaps = int(count_r.sum())
        if debug and swaps != int(count_l.sum()):
            raise AssertionError("removal pairing is unbalanced")
        pair_bounds = np.linspace(0, swaps, nb + 1).astype(np.int64)
        uid_index = rm.uid_index
        block_lo = bounds[:-1].copy()

        def swap(t: int) -> None:
            _swap_range(pair_bounds[t], pair_bounds[t + 1], to_right, not_to_left, block_lo, pref_r, pref_l,
                        addrs, uid_index)

        _run(pool, swap, nb)

        # step 5
        rm._truncate(dom, new_size)

        def release(t: int) -> None:
            if t < len(doomed) and doomed[t].shape[0]:
                _forget(doomed[t], rm.uid_domain)
                rm.free_records(doomed[t], t)

        _run(pool, release, len(doomed))
        out.append(RemovalScratch(dom, old_size, new_size, to_right, not_to_left, count_r, count_l, pref_r,
                                  pref_l, swaps))
    for d in deltas:
        d.n[1] = 0
    if out:
        rm._structure_changed(bump_epoch=True)
    return out


def sequential_remove(indices, size: int) -> np.ndarray:
    """Swap-with-last oracle: the surviving original indices in final slot order."""
    seq = list(range(size))
    pos = {i: i for i in range(size)}
    for i in sorted(set(int(x) for x in indices), reverse=True):
        p = pos.pop(i)
        last = seq.pop()
        if last != i:
            seq[p] = last
            pos[last] = p
    return np.asarray(seq, dtype=np.int64)


# additions


@njit(nogil=True, cache=True)
def _assign_uids(addrs, first_uid):
    for k in range(addrs.shape[0]):
        store_i64(addrs[k] + 8 * UID, first_uid + k)


@njit(nogil=True, cache=True)
def _place(src, dst, start, dom, uid_domain, uid_index):
    for k in range(src.shape[0]):
        a = src[k]
        dst[start + k] = a
        u = load_i64(a + 8 * UID)
        uid_domain[u] = dom
        uid_index[u] = start + k


def assign_canonical_uids(rm, deltas) -> None:
    """Give staged agents uids ordered by (parent uid, sequence), independent of the staging thread."""
    parts = [(d.added_addr[: d.n_added], d.added_parent[: d.n_added], d.added_seq[: d.n_added]) for d in deltas]
    total = sum(p[0].shape[0] for p in parts)
    if total == 0:
        return
    addr = np.concatenate([p[0] for p in parts])
    parent = np.concatenate([p[1] for p in parts])
    seq = np.concatenate([p[2] for p in parts])
    order = np.lexsort((seq, parent))
    first = rm.reserve_uids(total)
    _assign_uids(addr[order], first)


def commit_additions(rm, deltas, worker_domains=None, pool=None) -> list[tuple[int, int, int]]:
    """Append staged agents; returns the (domain, start, end) range each worker wrote."""
    if worker_domains is None:
        worker_domains = [0] * len(deltas)
    counts = np.array([d.n_added for d in deltas], dtype=np.int64)
    ranges = [(int(worker_domains[t]), 0, 0) for t in range(len(deltas))]
    if counts.sum() == 0:
        return ranges
    assign_canonical_uids(rm, deltas)
    starts = np.zeros(len(deltas), dtype=np.int64)
    for dom in range(rm.n_domains):
        members = [t for t in range(len(deltas)) if worker_domains[t] == dom]
        if not members:
            continue
        c = counts[members]
        total = int(c.sum())
        if total == 0:
            continue
        base = rm._grow(dom, total)
        starts[members] = base + parallel_prefix_sum(c)
        for t in members:
            ranges[t] = (dom, int(starts[t]), int(starts[t] + counts[t]))
    arrays = [rm.domain_array(d) for d in range(rm.n_domains)]

    def place(t: int) -> None:
        if t < len(deltas) and counts[t]:
            dom = ranges[t][0]
            _place(deltas[t].added_addr[: counts[t]], arrays[dom], starts[t], dom, rm.uid_domain, rm.uid_index)

    _run(pool, place, len(deltas))
    for d in deltas:
        d.n[0] = 0
    rm._structure_changed(bump_epoch=False)
    return ranges
