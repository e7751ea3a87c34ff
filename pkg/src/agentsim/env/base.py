from __future__ import annotations

from typing import TYPE_CHECKING, Callable

import numpy as np
from numba import njit

from .._mem import load_f64
from ..layout import DIAM, POS
from .query import query_all

if TYPE_CHECKING:
    from ..core.agent import AgentHandle
    from ..core.resource_manager import ResourceManager
    from ..execution import WorkerPool

_EMPTY_F2 = np.zeros((0, 6), dtype=np.float64)
_EMPTY_I2 = np.zeros((0, 3), dtype=np.int64)


@njit(nogil=True, cache=True)
def bounds_chunk(flat_addr, lo, hi, out):
    """min xyz, max xyz and largest diameter over ``flat_addr[lo:hi]``."""
    for ax in range(3):
        out[ax] = np.inf
        out[ax + 3] = -np.inf
    out[6] = 0.0
    for i in range(lo, hi):
        a = flat_addr[i]
        for ax in range(3):
            c = load_f64(a + 8 * (POS + ax))
            if c < out[ax]:
                out[ax] = c
            if c > out[ax + 3]:
                out[ax + 3] = c
        d = load_f64(a + 8 * DIAM)
        if d > out[6]:
            out[6] = d


class Environment:
    """Fixed-radius neighbor index rebuilt once per iteration.

    Subclasses implement :meth:`_build` and :meth:`data`; queries from numba
    kernels go through :func:`agentsim.env.query.env_query`.
    """

    name = "environment"

    def __init__(self):
        self.flat_addr = np.zeros(0, dtype=np.int64)
        self.domain_offsets = np.zeros(1, dtype=np.int64)
        self.largest_agent_diameter = 0.0
        self.min_search_radius = 0.0
        self.lower = np.zeros(3)
        self.upper = np.zeros(3)
        self.built_epoch = -1
        self.built_version = -1
        self.builds = 0

    def update(self, rm: ResourceManager, pool: WorkerPool | None = None) -> None:
        flat, offsets = rm.flat_addresses()
        self.flat_addr = flat
        self.domain_offsets = offsets
        n = flat.shape[0]
        chunks = pool.chunks(n) if pool is not None else [(0, n)]
        part = np.zeros((len(chunks), 7))

        def scan(tid: int) -> None:
            lo, hi = chunks[tid]
            bounds_chunk(flat, lo, hi, part[tid])

        if pool is not None:
            pool.run(scan)
        else:
            scan(0)
        if n:
            self.lower = part[:, :3].min(axis=0)
            self.upper = part[:, 3:6].max(axis=0)
            self.largest_agent_diameter = float(part[:, 6].max())
        else:
            self.lower = np.zeros(3)
            self.upper = np.zeros(3)
            self.largest_agent_diameter = 0.0
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("agent positions must be finite")
        self._build(pool, chunks)
        self.built_epoch = rm.epoch
        self.built_version = rm.version
        self.builds += 1

    def _build(self, pool, chunks) -> None:
        raise NotImplementedError

    def data(self) -> tuple:
        raise NotImplementedError

    @property
    def interaction_radius(self) -> float:
        return self.largest_agent_diameter

    @property
    def max_squared_radius(self) -> float:
        return np.inf

    def _flat(self, query: AgentHandle) -> int:
        return int(self.domain_offsets[query.domain] + query.index)

    def _handle(self, flat: int):
        from ..core.agent import AgentHandle

        d = int(np.searchsorted(self.domain_offsets, flat, side="right") - 1)
        return AgentHandle(d, int(flat - self.domain_offsets[d]))

    def neighbor_flats(self, query: AgentHandle, squared_radius: float) -> np.ndarray:
        if squared_radius > self.max_squared_radius:
            raise ValueError(
                f"squared radius {squared_radius} exceeds the {self.name} limit {self.max_squared_radius}"
            )
        flat = self._flat(query)
        a = int(self.flat_addr[flat])
        from .._mem import peek_f64

        x, y, z = (peek_f64(a + 8 * (POS + k)) for k in range(3))
        return query_all(self.data(), x, y, z, float(squared_radius), flat)

    def for_each_neighbor(
        self, query: AgentHandle, squared_radius: float, visitor: Callable[[AgentHandle], None]
    ) -> None:
        for flat in self.neighbor_flats(query, squared_radius):
            visitor(self._handle(int(flat)))

    def neighbors(self, query: AgentHandle, squared_radius: float) -> list[AgentHandle]:
        out: list[AgentHandle] = []
        self.for_each_neighbor(query, squared_radius, out.append)
        return out

    def neighbors_of_point(self, position, squared_radius: float) -> np.ndarray:
        """Flat indices of agents within the radius of an arbitrary point."""
        x, y, z = (float(c) for c in position)
        return query_all(self.data(), x, y, z, float(squared_radius), -1)
