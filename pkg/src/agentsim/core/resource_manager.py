from __future__ import annotations

import numpy as np
from numba import njit

from .._mem import load_i64, store_f64, store_i64
from ..alloc import MemoryManager, mm_free
from ..layout import AGENT_BYTES, BEH, BEHAVIOR_BYTES, NBEH, NEW, UID
from .agent import Agent, AgentHandle, AgentRecord, StaleHandleError, gather_state, init_record
from .behavior import BehaviorRegistry, behavior_template


@njit(nogil=True, cache=True)
def _fill_many(addrs, beh_addrs, uids, pos, diam, types, thresh, templ, flags):
    nb = templ.shape[0]
    for i in range(addrs.shape[0]):
        a = addrs[i]
        init_record(a, uids[i], pos[i, 0], pos[i, 1], pos[i, 2], diam[i], types[i], thresh[i], 0.0, 0.0, flags)
        store_i64(a + 8 * NBEH, nb)
        for k in range(nb):
            b = beh_addrs[i * nb + k]
            store_i64(b, np.int64(templ[k, 0]))
            store_i64(b + 8, np.int64(templ[k, 1]))
            store_f64(b + 16, templ[k, 2])
            store_f64(b + 24, templ[k, 3])
            store_i64(a + 8 * (BEH + k), b)


@njit(nogil=True, cache=True)
def free_agent_records(kind, st, bl, g, addrs, agent_pid, beh_pid, tid):
    """Release agent records together with their behavior records."""
    for j in range(addrs.shape[0]):
        a = addrs[j]
        for k in range(load_i64(a + 8 * NBEH)):
            mm_free(kind, st, bl, g, load_i64(a + 8 * (BEH + k)), beh_pid, tid)
        mm_free(kind, st, bl, g, a, agent_pid, tid)


@njit(nogil=True, cache=True)
def _rebuild_uid_maps(addrs, dom, uid_domain, uid_index):
    for i in range(addrs.shape[0]):
        u = load_i64(addrs[i] + 8 * UID)
        uid_domain[u] = dom
        uid_index[u] = i


class ResourceManager:
    """Per-domain dense sequences of agent record addresses.

    Structural changes (push, remove, commit, sort) are rejected while the
    parallel agent loop runs; handles carry the epoch in which they were
    issued and become stale when the epoch advances (sort and removal).
    """

    def __init__(self, memory: MemoryManager | None = None, domains: int = 1, seed: int = 0):
        if domains < 1:
            raise ValueError("domains must be >= 1")
        self.memory = memory if memory is not None else MemoryManager("pool", domains)
        self._owns_memory = memory is None
        self.n_domains = domains
        self.seed = int(seed)
        self._arrays = [np.zeros(16, dtype=np.int64) for _ in range(domains)]
        self._sizes = [0] * domains
        self.epoch = 0
        self.version = 0
        self.in_parallel = False
        self._rr = 0
        self._next_uid = 0
        self.uid_domain = np.full(16, -1, dtype=np.int64)
        self.uid_index = np.full(16, -1, dtype=np.int64)
        self.agent_pool = self.memory.size_class(AGENT_BYTES)
        self.behavior_pool = self.memory.size_class(BEHAVIOR_BYTES)
        self.registry = BehaviorRegistry()
        self._flat_cache: tuple[int, np.ndarray, np.ndarray] | None = None
        self._force_attributes: dict[int, bool] = {}

    # sizes and storage

    @property
    def size(self) -> int:
        return sum(self._sizes)

    def __len__(self) -> int:
        return self.size

    def domain_size(self, d: int) -> int:
        return self._sizes[d]

    def domain_sizes(self) -> list[int]:
        return list(self._sizes)

    def domain_array(self, d: int) -> np.ndarray:
        """Backing array of domain ``d`` (capacity may exceed the size)."""
        return self._arrays[d]

    def addresses(self, d: int) -> np.ndarray:
        return self._arrays[d][: self._sizes[d]]

    def flat_addresses(self) -> tuple[np.ndarray, np.ndarray]:
        """All record addresses, domains concatenated, plus the domain offsets."""
        if self._flat_cache is None or self._flat_cache[0] != self.version:
            offsets = np.zeros(self.n_domains + 1, dtype=np.int64)
            offsets[1:] = np.cumsum(self._sizes)
            flat = np.concatenate([self.addresses(d) for d in range(self.n_domains)])
            self._flat_cache = (self.version, flat.astype(np.int64, copy=False), offsets)
        return self._flat_cache[1], self._flat_cache[2]

    def _guard(self) -> None:
        if self.in_parallel:
            raise RuntimeError("structural change of the resource manager inside the parallel agent loop; stage it")

    def _structure_changed(self, bump_epoch: bool) -> None:
        self.version += 1
        if bump_epoch:
            self.epoch += 1

    def _grow(self, d: int, extra: int) -> int:
        """Make room for ``extra`` agents in domain ``d`` (one resize); returns the old size."""
        self._guard()
        old = self._sizes[d]
        need = old + extra
        arr = self._arrays[d]
        if need > arr.shape[0]:
            new = np.zeros(max(need, 2 * arr.shape[0]), dtype=np.int64)
            new[:old] = arr[:old]
            self._arrays[d] = new
        self._sizes[d] = need
        return old

    def _truncate(self, d: int, new_size: int) -> None:
        self._sizes[d] = new_size

    def _set_domains(self, arrays: list[np.ndarray], sizes: list[int]) -> None:
        self._arrays = arrays
        self._sizes = list(sizes)
        self._structure_changed(bump_epoch=True)

    # uids

    def reserve_uids(self, n: int) -> int:
        first = self._next_uid
        self._next_uid += n
        need = self._next_uid
        if need > self.uid_domain.shape[0]:
            cap = max(need, 2 * self.uid_domain.shape[0])
            for name in ("uid_domain", "uid_index"):
                old = getattr(self, name)
                arr = np.full(cap, -1, dtype=np.int64)
                arr[: old.shape[0]] = old
                setattr(self, name, arr)
        return first

    @property
    def next_uid(self) -> int:
        return self._next_uid

    def handle_of(self, uid: int) -> AgentHandle:
        if not 0 <= uid < self._next_uid or self.uid_domain[uid] < 0:
            raise KeyError(f"no agent with uid {uid}")
        return AgentHandle(int(self.uid_domain[uid]), int(self.uid_index[uid]), self.epoch)

    def rebuild_uid_maps(self) -> None:
        for d in range(self.n_domains):
            _rebuild_uid_maps(self.addresses(d), d, self.uid_domain, self.uid_index)

    # adding agents

    def _next_domain(self) -> int:
        d = self._rr
        self._rr = (self._rr + 1) % self.n_domains
        return d

    def new_record(self, agent: Agent, tid: int = 0, domain: int = 0, uid: int = -1, flags: int = NEW) -> int:
        """Allocate and fill a record (with behavior records); not yet in any sequence."""
        from .behavior import write_behavior

        a = self.agent_pool.allocate(tid, domain)
        x, y, z = agent.position
        init_record(a, uid, x, y, z, agent.diameter, agent.agent_type, agent.force_threshold,
                    agent.attributes[0], agent.attributes[1], flags)
        from .._mem import poke_i64

        poke_i64(a + 8 * NBEH, len(agent.behaviors))
        for k, b in enumerate(agent.behaviors):
            ba = self.behavior_pool.allocate(tid, domain)
            write_behavior(ba, self.registry.register(b), b)
            poke_i64(a + 8 * (BEH + k), ba)
        return a

    def push_back(self, agent: Agent, domain: int | None = None) -> AgentHandle:
        self._guard()
        d = self._next_domain() if domain is None else domain
        uid = agent.uid if agent.uid >= 0 else self.reserve_uids(1)
        if agent.uid >= 0:
            if agent.uid < self._next_uid and self.uid_domain[agent.uid] >= 0:
                raise ValueError(f"uid {agent.uid} already in use")
            if agent.uid >= self._next_uid:
                self.reserve_uids(agent.uid + 1 - self._next_uid)
        a = self.new_record(agent, 0, d, uid)
        i = self._grow(d, 1)
        self._arrays[d][i] = a
        self.uid_domain[uid] = d
        self.uid_index[uid] = i
        self._structure_changed(bump_epoch=False)
        return AgentHandle(d, i, self.epoch)

    def push_back_many(self, positions, diameters, behaviors=(), agent_types=None, force_thresholds=None):
        """Bulk creation: agent ``i`` goes to domain ``i mod domains`` (round robin)."""
        self._guard()
        pos = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        n = pos.shape[0]
        diam = np.broadcast_to(np.asarray(diameters, dtype=np.float64), (n,)).copy()
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        if n and not np.all(diam > 0):
            raise ValueError("diameters must be positive")
        types = np.zeros(n, dtype=np.int64) if agent_types is None else np.asarray(agent_types, dtype=np.int64)
        thresh = np.zeros(n) if force_thresholds is None else np.broadcast_to(
            np.asarray(force_thresholds, dtype=np.float64), (n,)).copy()
        templ = behavior_template(list(behaviors), self.registry)
        first = self.reserve_uids(n)
        uids = np.arange(first, first + n, dtype=np.int64)
        start = self._rr
        dom_of = (np.arange(n) + start) % self.n_domains
        self._rr = (start + n) % self.n_domains
        for d in range(self.n_domains):
            sel = np.nonzero(dom_of == d)[0]
            m = sel.shape[0]
            if m == 0:
                continue
            addrs = self.memory.alloc_many(self.agent_pool, m, 0, d)
            beh = self.memory.alloc_many(self.behavior_pool, m * templ.shape[0], 0, d)
            _fill_many(addrs, beh, uids[sel], pos[sel], diam[sel], types[sel], thresh[sel], templ, NEW)
            base = self._grow(d, m)
            self._arrays[d][base:base + m] = addrs
            self.uid_domain[uids[sel]] = d
            self.uid_index[uids[sel]] = np.arange(base, base + m)
        self._structure_changed(bump_epoch=False)
        return uids

    # access

    def _check(self, handle: AgentHandle) -> None:
        if handle.epoch >= 0 and handle.epoch != self.epoch:
            raise StaleHandleError(f"handle from epoch {handle.epoch} used in epoch {self.epoch}")
        if not (0 <= handle.domain < self.n_domains and 0 <= handle.index < self._sizes[handle.domain]):
            raise IndexError(f"handle {handle} out of range")

    def address(self, handle: AgentHandle) -> int:
        self._check(handle)
        return int(self._arrays[handle.domain][handle.index])

    def get(self, handle: AgentHandle) -> AgentRecord:
        return AgentRecord(self.address(handle), self)

    def get_by_uid(self, uid: int) -> AgentRecord:
        return self.get(self.handle_of(uid))

    def record(self, address: int) -> AgentRecord:
        return AgentRecord(address, self)

    def record_at_flat(self, flat: int) -> AgentRecord:
        return AgentRecord(int(self.flat_addresses()[0][flat]), self)

    def for_each(self, visitor) -> None:
        """Sequentially call ``visitor(handle, record)`` in per-domain sequence order."""
        for d in range(self.n_domains):
            for i, a in enumerate(self.addresses(d).tolist()):
                visitor(AgentHandle(d, i, self.epoch), AgentRecord(a, self))

    def handles(self) -> list[AgentHandle]:
        return [AgentHandle(d, i, self.epoch) for d in range(self.n_domains) for i in range(self._sizes[d])]

    def uids(self) -> np.ndarray:
        return gather_state(self.flat_addresses()[0])[0]

    def snapshot(self) -> dict[str, np.ndarray]:
        uid, pos, diam, flags, nonzero, typ, force = gather_state(self.flat_addresses()[0])
        return {"uid": uid, "position": pos, "diameter": diam, "flags": flags, "nonzero": nonzero,
                "agent_type": typ, "last_force": force}

    # removal outside the agent loop

    def remove(self, handle: AgentHandle) -> None:
        """Swap-with-last removal (initialization and standalone operations only)."""
        self._guard()
        self._check(handle)
        d, i = handle.domain, handle.index
        arr = self._arrays[d]
        last = self._sizes[d] - 1
        a = int(arr[i])
        uid = int(AgentRecord(a).uid)
        if i != last:
            moved = int(arr[last])
            arr[i] = moved
            self.uid_index[AgentRecord(moved).uid] = i
        self._sizes[d] = last
        self.uid_domain[uid] = -1
        self.free_records(np.array([a], dtype=np.int64), 0)
        self._structure_changed(bump_epoch=True)

    def free_records(self, addrs: np.ndarray, tid: int = 0) -> None:
        kind, st, bl, g = self.memory.kernel_args()
        free_agent_records(kind, st, bl, g, np.ascontiguousarray(addrs, dtype=np.int64),
                           self.agent_pool.pids[0], self.behavior_pool.pids[0], tid)

    # attribute hooks

    def register_force_attribute(self, k: int, affects_neighbors: bool) -> None:
        """Declare that model attribute ``k`` influences the force (and whether only its own)."""
        self._force_attributes[k] = affects_neighbors

    def attribute_changed(self, record: AgentRecord, k: int) -> None:
        if k in self._force_attributes:
            record.mark_changed(self._force_attributes[k])

    def clear(self) -> None:
        self._guard()
        for d in range(self.n_domains):
            if self._sizes[d]:
                self.free_records(self.addresses(d).copy())
            self._sizes[d] = 0
        self._structure_changed(bump_epoch=True)

    def close(self) -> None:
        self.clear()
        if self._owns_memory:
            self.memory.close()


def rm_push_back(rm: ResourceManager, agent: Agent, domain: int | None = None) -> AgentHandle:
    return rm.push_back(agent, domain)


def rm_for_each(rm: ResourceManager, visitor) -> None:
    rm.for_each(visitor)
