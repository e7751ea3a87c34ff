from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .._mem import load_f64, load_i64, peek_f64, peek_i64, poke_f64, poke_i64, store_f64, store_i64
from ..layout import (
    AGENT_WORDS,
    ATTR,
    DIAM,
    DISP,
    EXTERNAL,
    FLAGS,
    FORCE,
    GREW,
    LAST_DISP,
    MOVED,
    NBEH,
    NEW,
    NEW_DIAM,
    NEW_NEIGHBOR,
    NONZERO,
    POS,
    RNG,
    SELF_CHANGED,
    STATIC,
    THRESH,
    TYPE,
    UID,
    WAS_STATIC,
)


class StaleHandleError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentHandle:
    """(domain, index) into the resource manager.

    ``epoch`` records when the handle was issued; it is ignored by equality
    and checked on dereference.
    """

    domain: int
    index: int
    epoch: int = field(default=-1, compare=False)

    def packed(self) -> int:
        return (self.domain << 32) | self.index


@dataclass
class StaticnessState:
    is_static: bool = False
    was_static: bool = False
    moved_last_iteration: bool = False
    growth_flag: bool = False
    new_neighbor_flag: bool = False
    nonzero_neighbor_force_count_last_iter: int = 0

    @classmethod
    def from_flags(cls, flags: int, nonzero: int) -> StaticnessState:
        return cls(
            bool(flags & STATIC),
            bool(flags & WAS_STATIC),
            bool(flags & MOVED),
            bool(flags & GREW),
            bool(flags & NEW_NEIGHBOR),
            int(nonzero),
        )


@dataclass
class Agent:
    """Plain agent value used to create records."""

    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    diameter: float = 10.0
    behaviors: list = field(default_factory=list)
    agent_type: int = 0
    force_threshold: float = 0.0
    attributes: tuple[float, float] = (0.0, 0.0)
    uid: int = -1

    def __post_init__(self):
        self.position = tuple(float(c) for c in self.position)
        if len(self.position) != 3:
            raise ValueError("position must have three components")
        if not all(math.isfinite(c) for c in self.position):
            raise ValueError(f"position components must be finite, got {self.position}")
        if not (self.diameter > 0 and math.isfinite(self.diameter)):
            raise ValueError(f"diameter must be positive, got {self.diameter}")
        if self.force_threshold < 0:
            raise ValueError("force_threshold must be >= 0")
        from ..layout import MAX_BEHAVIORS

        if len(self.behaviors) > MAX_BEHAVIORS:
            raise ValueError(f"at most {MAX_BEHAVIORS} behaviors per agent")


@njit(nogil=True, cache=True)
def init_record(addr, uid, x, y, z, diam, agent_type, thresh, a0, a1, flags):
    for w in range(AGENT_WORDS):
        store_i64(addr + 8 * w, 0)
    store_i64(addr + 8 * UID, uid)
    store_f64(addr + 8 * POS, x)
    store_f64(addr + 8 * (POS + 1), y)
    store_f64(addr + 8 * (POS + 2), z)
    store_f64(addr + 8 * DIAM, diam)
    store_f64(addr + 8 * NEW_DIAM, diam)
    store_i64(addr + 8 * TYPE, agent_type)
    store_f64(addr + 8 * THRESH, thresh)
    store_f64(addr + 8 * ATTR, a0)
    store_f64(addr + 8 * (ATTR + 1), a1)
    store_i64(addr + 8 * FLAGS, flags)


@njit(nogil=True, cache=True)
def gather_state(flat_addr):
    """uid, position, diameter, flags, nonzero count, type and last force of every agent."""
    n = flat_addr.shape[0]
    uid = np.empty(n, dtype=np.int64)
    pos = np.empty((n, 3))
    diam = np.empty(n)
    flags = np.empty(n, dtype=np.int64)
    nonzero = np.empty(n, dtype=np.int64)
    typ = np.empty(n, dtype=np.int64)
    force = np.empty((n, 3))
    for i in range(n):
        a = flat_addr[i]
        uid[i] = load_i64(a + 8 * UID)
        for k in range(3):
            pos[i, k] = load_f64(a + 8 * (POS + k))
            force[i, k] = load_f64(a + 8 * (FORCE + k))
        diam[i] = load_f64(a + 8 * DIAM)
        flags[i] = load_i64(a + 8 * FLAGS)
        nonzero[i] = load_i64(a + 8 * NONZERO)
        typ[i] = load_i64(a + 8 * TYPE)
    return uid, pos, diam, flags, nonzero, typ, force


class AgentRecord:
    """Live view of one agent record.

    Reads are always current.  Inside the agent loop an agent may change
    only itself, and physical changes go through :meth:`displace` and
    :attr:`diameter` (applied after the loop) so the result does not depend
    on which worker ran first.
    """

    __slots__ = ("address", "_rm")

    def __init__(self, address: int, rm=None):
        self.address = int(address)
        self._rm = rm

    def _f(self, word: int) -> float:
        return float(peek_f64(self.address + 8 * word))

    def _i(self, word: int) -> int:
        return int(peek_i64(self.address + 8 * word))

    @property
    def uid(self) -> int:
        return self._i(UID)

    @property
    def position(self) -> np.ndarray:
        return np.array([self._f(POS + k) for k in range(3)])

    @position.setter
    def position(self, value) -> None:
        if self._rm is not None and self._rm.in_parallel:
            raise RuntimeError("set positions through displace() inside the agent loop")
        value = [float(v) for v in value]
        if not all(math.isfinite(v) for v in value):
            raise ValueError("position components must be finite")
        old = self.position
        carried = (self.flags & (EXTERNAL | MOVED)) == (EXTERNAL | MOVED)
        for k in range(3):
            poke_f64(self.address + 8 * (POS + k), value[k])
            last = self.address + 8 * (LAST_DISP + k)
            # keep the distance from the position neighbors last saw
            poke_f64(last, (peek_f64(last) if carried else 0.0) + value[k] - old[k])
        self._set_flag(MOVED | EXTERNAL)

    def displace(self, delta) -> None:
        for k in range(3):
            a = self.address + 8 * (DISP + k)
            poke_f64(a, peek_f64(a) + float(delta[k]))

    @property
    def pending_displacement(self) -> np.ndarray:
        return np.array([self._f(DISP + k) for k in range(3)])

    @property
    def diameter(self) -> float:
        return self._f(DIAM)

    @diameter.setter
    def diameter(self, value: float) -> None:
        if not value > 0:
            raise ValueError("diameter must be positive")
        poke_f64(self.address + 8 * NEW_DIAM, float(value))
        if self._rm is None or not self._rm.in_parallel:
            poke_f64(self.address + 8 * DIAM, float(value))
            self._set_flag(GREW | EXTERNAL)

    @property
    def pending_diameter(self) -> float:
        return self._f(NEW_DIAM)

    @property
    def agent_type(self) -> int:
        return self._i(TYPE)

    @property
    def force_threshold(self) -> float:
        return self._f(THRESH)

    @force_threshold.setter
    def force_threshold(self, value: float) -> None:
        if value < 0:
            raise ValueError("force_threshold must be >= 0")
        poke_f64(self.address + 8 * THRESH, float(value))
        # affects only this agent's own movement
        self._set_flag(SELF_CHANGED)

    def attribute(self, k: int) -> float:
        return self._f(ATTR + k)

    def set_attribute(self, k: int, value: float) -> None:
        poke_f64(self.address + 8 * (ATTR + k), float(value))
        if self._rm is not None:
            self._rm.attribute_changed(self, k)

    @property
    def last_force(self) -> np.ndarray:
        return np.array([self._f(FORCE + k) for k in range(3)])

    @property
    def flags(self) -> int:
        return self._i(FLAGS)

    def _set_flag(self, bit: int) -> None:
        poke_i64(self.address + 8 * FLAGS, self.flags | bit)

    def mark_changed(self, affects_neighbors: bool) -> None:
        """Invalidate staticness after a force-relevant attribute change."""
        self._set_flag(GREW | EXTERNAL if affects_neighbors else SELF_CHANGED)

    @property
    def staticness(self) -> StaticnessState:
        return StaticnessState.from_flags(self.flags, self._i(NONZERO))

    @property
    def is_static(self) -> bool:
        return bool(self.flags & STATIC)

    @property
    def is_new(self) -> bool:
        return bool(self.flags & NEW)

    @property
    def rng_counter(self) -> int:
        return self._i(RNG)

    def next_random(self) -> float:
        """Draw from this agent's counter-based stream."""
        from ..rng import uniform

        c = self._i(RNG)
        poke_i64(self.address + 8 * RNG, c + 1)
        seed = self._rm.seed if self._rm is not None else 0
        return float(uniform(seed, self.uid, c))

    @property
    def behavior_addresses(self) -> list[int]:
        from ..layout import BEH

        return [self._i(BEH + k) for k in range(self._i(NBEH))]

    def __repr__(self) -> str:
        p = ", ".join(f"{c:.3f}" for c in self.position)
        return f"AgentRecord(uid={self.uid}, position=({p}), diameter={self.diameter:.3f})"
