"""Collision forces, displacement integration and static-agent detection.

The force is a linear sphere-overlap repulsion::

    overlap = (d_a + d_b) / 2 - |p_a - p_b|
    F_a     = repulsion * overlap * (p_a - p_b) / |p_a - p_b|   if overlap > 0

Forces produce a displacement ``F * time_step`` (clamped) only when their
magnitude exceeds the force threshold.  Displacements and diameter changes
are applied after the agent loop by :func:`integrate_chunk`, which also
decides staticness.  An agent is static when, during the last iteration, it
did not move or grow, its own force-relevant attributes did not change and
at most one neighbor force was non-zero.  Movement, growth and creation
also clear the staticness of every agent within the interaction radius
(:func:`propagate_chunk`, run after the environment update).  Static agents
skip the force computation; their force would be unchanged and therefore
still produce no movement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from ._mem import atomic_and_addr, atomic_or_addr, load_f64, load_i64, store_f64, store_i64
from .env.query import query_grow
from .layout import (
    C_FORCE_EVALS,
    C_MECH_RUNS,
    C_STATIC_SKIPS,
    DIAM,
    DISP,
    EXTERNAL,
    FLAGS,
    FORCE,
    FP_DT,
    FP_K,
    FP_MAXD,
    FP_RADIUS,
    FP_THRESH,
    GREW,
    IP_DETECT,
    IP_SEED,
    LAST_DISP,
    MOVED,
    NEIGHBOR_DIRTY,
    NEW,
    NEW_DIAM,
    NEW_NEIGHBOR,
    NONZERO,
    POS,
    STATIC,
    THRESH,
    TRANSIENT,
    UID,
    WAS_STATIC,
)
from .rng import unit_vector

COINCIDENT = 1e-12


@dataclass
class ForceParams:
    repulsion_coefficient: float = 1.0
    max_displacement_per_step: float = 3.0
    force_threshold: float = 0.0
    time_step: float = 0.05

    def __post_init__(self):
        if not self.repulsion_coefficient > 0:
            raise ValueError("repulsion_coefficient must be positive")
        if not self.max_displacement_per_step > 0:
            raise ValueError("max_displacement_per_step must be positive")
        if self.force_threshold < 0:
            raise ValueError("force_threshold must be >= 0")
        if not self.time_step > 0:
            raise ValueError("time_step must be positive")


@njit(nogil=True, cache=True)
def pair_force(ax, ay, az, da, ua, bx, by, bz, db, ub, k, seed):
    """Force on agent a from agent b."""
    dx = ax - bx
    dy = ay - by
    dz = az - bz
    dist = math.sqrt(dx * dx + dy * dy + dz * dz)
    overlap = 0.5 * (da + db) - dist
    if overlap <= 0.0:
        return 0.0, 0.0, 0.0
    if dist < COINCIDENT:
        lo = min(ua, ub)
        hi = max(ua, ub)
        ux, uy, uz = unit_vector(seed ^ 0x5EED, lo, 2 * hi)
        s = k * overlap if ua < ub else -k * overlap
        return s * ux, s * uy, s * uz
    s = k * overlap / dist
    return s * dx, s * dy, s * dz


def compute_pairwise_force(a, b, params: ForceParams | None = None, seed: int = 0) -> np.ndarray:
    """Force on ``a`` exerted by ``b``.  Accepts :class:`Agent` values or records."""
    params = params or ForceParams()
    pa, pb = np.asarray(a.position, float), np.asarray(b.position, float)
    if not (a.diameter > 0 and b.diameter > 0):
        raise ValueError("diameters must be positive")
    ua = getattr(a, "uid", 0)
    ub = getattr(b, "uid", 1)
    f = pair_force(pa[0], pa[1], pa[2], float(a.diameter), ua, pb[0], pb[1], pb[2], float(b.diameter), ub,
                   params.repulsion_coefficient, seed)
    return np.array(f)


@njit(nogil=True, cache=True)
def mechanics_one(a, self_flat, env, fp, ip, counters, buf):
    """Mechanical force operation on one agent; returns the (possibly grown) query buffer."""
    flags = load_i64(a + 8 * FLAGS)
    if ip[IP_DETECT] != 0 and (flags & STATIC) != 0:
        counters[C_STATIC_SKIPS] += 1
        return buf
    counters[C_MECH_RUNS] += 1
    x = load_f64(a + 8 * POS)
    y = load_f64(a + 8 * (POS + 1))
    z = load_f64(a + 8 * (POS + 2))
    da = load_f64(a + 8 * DIAM)
    ua = load_i64(a + 8 * UID)
    r = fp[FP_RADIUS]
    n, buf = query_grow(env, x, y, z, r * r, self_flat, buf)
    flat_addr = env[6]
    k = fp[FP_K]
    seed = ip[IP_SEED]
    fx = 0.0
    fy = 0.0
    fz = 0.0
    nonzero = 0
    for j in range(n):
        b = flat_addr[buf[j]]
        gx, gy, gz = pair_force(x, y, z, da, ua, load_f64(b + 8 * POS), load_f64(b + 8 * (POS + 1)),
                                load_f64(b + 8 * (POS + 2)), load_f64(b + 8 * DIAM), load_i64(b + 8 * UID), k, seed)
        if gx != 0.0 or gy != 0.0 or gz != 0.0:
            nonzero += 1
            fx += gx
            fy += gy
            fz += gz
    counters[C_FORCE_EVALS] += n
    store_f64(a + 8 * FORCE, fx)
    store_f64(a + 8 * (FORCE + 1), fy)
    store_f64(a + 8 * (FORCE + 2), fz)
    store_i64(a + 8 * NONZERO, nonzero)
    mag = math.sqrt(fx * fx + fy * fy + fz * fz)
    if mag > max(fp[FP_THRESH], load_f64(a + 8 * THRESH)):
        dt = fp[FP_DT]
        dx = fx * dt
        dy = fy * dt
        dz = fz * dt
        step = mag * dt
        if step > fp[FP_MAXD]:
            s = fp[FP_MAXD] / step
            dx *= s
            dy *= s
            dz *= s
        store_f64(a + 8 * DISP, load_f64(a + 8 * DISP) + dx)
        store_f64(a + 8 * (DISP + 1), load_f64(a + 8 * (DISP + 1)) + dy)
        store_f64(a + 8 * (DISP + 2), load_f64(a + 8 * (DISP + 2)) + dz)
    return buf


@njit(nogil=True, cache=True)
def integrate_chunk(flat_addr, lo, hi, detect):
    """Apply pending displacement and diameter; decide staticness for the next iteration."""
    for i in range(lo, hi):
        a = flat_addr[i]
        f = load_i64(a + 8 * FLAGS)
        ext = (f & EXTERNAL) != 0
        moved = ext and (f & MOVED) != 0
        for c in range(3):
            d = load_f64(a + 8 * (DISP + c))
            if d != 0.0:
                moved = True
                store_f64(a + 8 * (POS + c), load_f64(a + 8 * (POS + c)) + d)
            if ext and (f & MOVED) != 0:
                d += load_f64(a + 8 * (LAST_DISP + c))
            store_f64(a + 8 * (LAST_DISP + c), d)
            store_f64(a + 8 * (DISP + c), 0.0)
        nd = load_f64(a + 8 * NEW_DIAM)
        grew = nd > load_f64(a + 8 * DIAM) or (ext and (f & GREW) != 0)
        store_f64(a + 8 * DIAM, nd)
        nf = f & ~(TRANSIENT | STATIC | WAS_STATIC | EXTERNAL)
        if f & STATIC:
            nf |= WAS_STATIC
        if moved:
            nf |= MOVED
        if grew:
            nf |= GREW
        if detect and not moved and not grew and (f & TRANSIENT) == 0 and load_i64(a + 8 * NONZERO) <= 1:
            nf |= STATIC
        store_i64(a + 8 * FLAGS, nf)


@njit(nogil=True, cache=True)
def _invalidate_around(env, x, y, z, r2, self_flat, bits_new, buf):
    n, buf = query_grow(env, x, y, z, r2, self_flat, buf)
    flat_addr = env[6]
    for j in range(n):
        b = flat_addr[buf[j]] + 8 * FLAGS
        atomic_and_addr(b, ~np.int64(STATIC))
        if bits_new:
            atomic_or_addr(b, NEW_NEIGHBOR)
    return buf


@njit(nogil=True, cache=True)
def propagate_chunk(env, lo, hi, radius):
    """Clear the staticness of agents near anything that moved, grew or was created."""
    flat_addr = env[6]
    buf = np.empty(64, dtype=np.int64)
    r2 = radius * radius
    touched = 0
    for i in range(lo, hi):
        a = flat_addr[i]
        f = load_i64(a + 8 * FLAGS)
        if (f & NEIGHBOR_DIRTY) == 0:
            continue
        touched += 1
        atomic_and_addr(a + 8 * FLAGS, ~np.int64(STATIC))
        x = load_f64(a + 8 * POS)
        y = load_f64(a + 8 * (POS + 1))
        z = load_f64(a + 8 * (POS + 2))
        is_new = (f & NEW) != 0
        buf = _invalidate_around(env, x, y, z, r2, i, is_new, buf)
        if f & MOVED:
            # neighbors the agent left behind
            buf = _invalidate_around(env, x - load_f64(a + 8 * LAST_DISP), y - load_f64(a + 8 * (LAST_DISP + 1)),
                                     z - load_f64(a + 8 * (LAST_DISP + 2)), r2, i, is_new, buf)
    return touched


def mechanical_forces_op(record, environment, params: ForceParams, detect_static_agents: bool = False,
                         seed: int = 0) -> dict:
    """Run the force operation on one agent outside the parallel loop; returns counters."""
    from .layout import C_WORDS, FP_WORDS, IP_WORDS

    fp = force_param_array(params, environment.interaction_radius)
    ip = np.zeros(IP_WORDS, dtype=np.int64)
    ip[IP_SEED] = seed
    ip[IP_DETECT] = int(detect_static_agents)
    counters = np.zeros(C_WORDS, dtype=np.int64)
    flat = int(np.nonzero(environment.flat_addr == record.address)[0][0])
    mechanics_one(record.address, flat, environment.data(), fp, ip, counters, np.empty(64, dtype=np.int64))
    assert fp.shape[0] == FP_WORDS
    return {"force_evals": int(counters[C_FORCE_EVALS]), "static_skips": int(counters[C_STATIC_SKIPS])}


def force_param_array(params: ForceParams, radius: float) -> np.ndarray:
    from .layout import FP_WORDS

    fp = np.zeros(FP_WORDS)
    fp[FP_DT] = params.time_step
    fp[FP_K] = params.repulsion_coefficient
    fp[FP_MAXD] = params.max_displacement_per_step
    fp[FP_THRESH] = params.force_threshold
    fp[FP_RADIUS] = radius
    return fp


def update_staticness(rm, environment, pool=None, detect: bool = True) -> None:
    """Integrate pending changes for every agent, then propagate invalidation to neighbors.

    The scheduler splits these two halves around the environment update;
    this helper runs both back to back for standalone use.
    """
    flat, _ = rm.flat_addresses()
    integrate_chunk(flat, 0, flat.shape[0], detect)
    environment.update(rm, pool)
    propagate_chunk(environment.data(), 0, flat.shape[0], environment.interaction_radius)
