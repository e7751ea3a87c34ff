"""Behaviors attached to agents.

Built-in behaviors run inside compiled kernels.  A custom behavior is a
subclass overriding :meth:`Behavior.run`; agents carrying one are processed
by the Python path of the agent loop (same semantics, slower).
"""

from __future__ import annotations

import math
import threading

import numpy as np
from numba import njit

from .._mem import load_f64, load_i64, store_f64, store_i64
from ..env.query import query_grow
from ..layout import (
    B_COPY_TO_DAUGHTER,
    B_FLAGS,
    B_KIND,
    B_P0,
    B_P1,
    DISP,
    FP_RADIUS,
    KIND_CLUSTER,
    KIND_GROW_DIVIDE,
    KIND_RANDOM_WALK,
    NEW_DIAM,
    POS,
    PY_KIND_BASE,
    RNG,
    TYPE,
    UID,
)
from ..rng import unit_vector

DIVISION_VOLUME_RATIO = 2.0 ** (1.0 / 3.0)


class Behavior:
    """Base class.  ``copy_to_daughter`` controls inheritance on division."""

    kind = 0

    def __init__(self, copy_to_daughter: bool = True):
        self.copy_to_daughter = copy_to_daughter

    @property
    def params(self) -> tuple[float, float]:
        return (0.0, 0.0)

    @property
    def flags(self) -> int:
        return B_COPY_TO_DAUGHTER if self.copy_to_daughter else 0

    def run(self, agent, ctx) -> None:  # pragma: no cover - overridden
        raise NotImplementedError


class GrowDivide(Behavior):
    """Grow the diameter by ``growth_rate`` per iteration; divide at ``division_diameter``.

    Division halves the volume: mother and daughter get ``d / 2**(1/3)`` and
    the daughter is placed half a diameter away in a random direction.
    """

    kind = KIND_GROW_DIVIDE

    def __init__(self, growth_rate: float, division_diameter: float, copy_to_daughter: bool = True):
        super().__init__(copy_to_daughter)
        if growth_rate < 0 or not division_diameter > 0:
            raise ValueError("growth_rate must be >= 0 and division_diameter > 0")
        self.growth_rate = float(growth_rate)
        self.division_diameter = float(division_diameter)

    @property
    def params(self):
        return (self.growth_rate, self.division_diameter)


class ClusterMove(Behavior):
    """Step toward the centroid of same-type neighbors.

    ``radius`` 0 means the interaction radius of the current iteration.
    """

    kind = KIND_CLUSTER

    def __init__(self, step: float, radius: float = 0.0, copy_to_daughter: bool = True):
        super().__init__(copy_to_daughter)
        if step < 0 or radius < 0:
            raise ValueError("step and radius must be >= 0")
        self.step = float(step)
        self.radius = float(radius)

    @property
    def params(self):
        return (self.step, self.radius)


class RandomWalk(Behavior):
    kind = KIND_RANDOM_WALK

    def __init__(self, step: float, copy_to_daughter: bool = True):
        super().__init__(copy_to_daughter)
        self.step = float(step)

    @property
    def params(self):
        return (self.step, 0.0)


class BehaviorRegistry:
    """Maps custom behavior instances to kind ids stored in behavior records."""

    def __init__(self):
        self._by_kind: dict[int, Behavior] = {}
        self._lock = threading.Lock()
        # largest neighbor-search radius of any built-in behavior; the grid box must cover it
        self.search_radius = 0.0

    def register(self, behavior: Behavior) -> int:
        if type(behavior).run is Behavior.run:
            self.search_radius = max(self.search_radius, getattr(behavior, "radius", 0.0))
            return behavior.kind
        with self._lock:
            for k, b in self._by_kind.items():
                if b is behavior:
                    return k
            k = PY_KIND_BASE + len(self._by_kind)
            self._by_kind[k] = behavior
            return k

    def get(self, kind: int) -> Behavior:
        return self._by_kind[kind]

    def __len__(self) -> int:
        return len(self._by_kind)

    @property
    def has_custom(self) -> bool:
        return bool(self._by_kind)


class BehaviorContext:
    """What a custom behavior may touch: its own agent, neighbor queries and staging."""

    def __init__(self, sim, tid: int, domain: int):
        self.sim = sim
        self.tid = tid
        self.domain = domain

    @property
    def iteration(self) -> int:
        return self.sim.iteration

    @property
    def params(self):
        return self.sim.params

    def neighbors(self, agent, radius: float | None = None):
        env = self.sim.environment
        r = env.interaction_radius if radius is None else radius
        out = []
        for f in env.neighbors_of_point(agent.position, r * r):
            a = int(env.flat_addr[f])
            if a != agent.address:
                out.append(self.sim.rm.record(a))
        return out

    def new_agent(self, parent, agent) -> None:
        self.sim.stage_new_agent(self.tid, self.domain, parent, agent)

    def remove_agent(self, agent) -> None:
        self.sim.stage_removal(self.tid, agent)

    def with_neighbor_lock(self, neighbor, fn):
        return self.sim.neighbor_locks.run(neighbor.uid, fn, neighbor)


class NeighborLocks:
    """Striped per-agent locks for the rare case of a behavior modifying a neighbor."""

    def __init__(self, stripes: int = 1024):
        self._locks = [threading.Lock() for _ in range(stripes)]
        self._held = threading.local()

    def run(self, uid: int, fn, *args):
        if getattr(self._held, "active", False):
            raise RuntimeError("nested neighbor locks are not allowed")
        lock = self._locks[uid % len(self._locks)]
        self._held.active = True
        try:
            with lock:
                return fn(*args)
        finally:
            self._held.active = False


# kernels


@njit(nogil=True, cache=True)
def grow_divide(addr, baddr, seed, divide_out):
    """Returns True when the agent divides; ``divide_out`` gets the daughter position and diameter."""
    d = load_f64(addr + 8 * NEW_DIAM) + load_f64(baddr + 8 * B_P0)
    if d < load_f64(baddr + 8 * B_P1):
        store_f64(addr + 8 * NEW_DIAM, d)
        return False
    nd = d / DIVISION_VOLUME_RATIO
    store_f64(addr + 8 * NEW_DIAM, nd)
    c = load_i64(addr + 8 * RNG)
    ux, uy, uz = unit_vector(seed, load_i64(addr + 8 * UID), c)
    store_i64(addr + 8 * RNG, c + 2)
    half = 0.5 * nd
    divide_out[0] = load_f64(addr + 8 * POS) + ux * half
    divide_out[1] = load_f64(addr + 8 * (POS + 1)) + uy * half
    divide_out[2] = load_f64(addr + 8 * (POS + 2)) + uz * half
    divide_out[3] = nd
    divide_out[4] = c  # sequence number for canonical uid assignment
    return True


@njit(nogil=True, cache=True)
def cluster_move(addr, baddr, env, fp, self_flat, buf):
    step = load_f64(baddr + 8 * B_P0)
    r = load_f64(baddr + 8 * B_P1)
    if r <= 0.0:
        r = fp[FP_RADIUS]
    x = load_f64(addr + 8 * POS)
    y = load_f64(addr + 8 * (POS + 1))
    z = load_f64(addr + 8 * (POS + 2))
    n, buf = query_grow(env, x, y, z, r * r, self_flat, buf)
    t = load_i64(addr + 8 * TYPE)
    flat_addr = env[6]
    cx = 0.0
    cy = 0.0
    cz = 0.0
    m = 0
    for k in range(n):
        a = flat_addr[buf[k]]
        if load_i64(a + 8 * TYPE) == t:
            cx += load_f64(a + 8 * POS)
            cy += load_f64(a + 8 * (POS + 1))
            cz += load_f64(a + 8 * (POS + 2))
            m += 1
    if m > 0:
        dx = cx / m - x
        dy = cy / m - y
        dz = cz / m - z
        dist = math.sqrt(dx * dx + dy * dy + dz * dz)
        if dist > 0.0:
            s = min(step, dist) / dist
            store_f64(addr + 8 * DISP, load_f64(addr + 8 * DISP) + dx * s)
            store_f64(addr + 8 * (DISP + 1), load_f64(addr + 8 * (DISP + 1)) + dy * s)
            store_f64(addr + 8 * (DISP + 2), load_f64(addr + 8 * (DISP + 2)) + dz * s)
    return buf


@njit(nogil=True, cache=True)
def random_walk(addr, baddr, seed):
    step = load_f64(baddr + 8 * B_P0)
    c = load_i64(addr + 8 * RNG)
    ux, uy, uz = unit_vector(seed, load_i64(addr + 8 * UID), c)
    store_i64(addr + 8 * RNG, c + 2)
    store_f64(addr + 8 * DISP, load_f64(addr + 8 * DISP) + ux * step)
    store_f64(addr + 8 * (DISP + 1), load_f64(addr + 8 * (DISP + 1)) + uy * step)
    store_f64(addr + 8 * (DISP + 2), load_f64(addr + 8 * (DISP + 2)) + uz * step)


def write_behavior(addr: int, kind: int, behavior: Behavior) -> None:
    from .._mem import poke_f64, poke_i64

    p0, p1 = behavior.params
    poke_i64(addr + 8 * B_KIND, kind)
    poke_i64(addr + 8 * B_FLAGS, behavior.flags)
    poke_f64(addr + 8 * B_P0, p0)
    poke_f64(addr + 8 * B_P1, p1)


def behavior_template(behaviors, registry: BehaviorRegistry) -> np.ndarray:
    """(k, 4) float64 rows [kind, flags, p0, p1] describing a behavior list."""
    rows = np.zeros((len(behaviors), 4))
    for i, b in enumerate(behaviors):
        rows[i] = (registry.register(b), b.flags, *b.params)
    return rows
