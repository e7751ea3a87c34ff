"""Compiled body of the parallel agent loop (built-in behaviors and mechanics)."""

import numpy as np
from numba import njit

from .._mem import copy_words, load_f64, load_i64, store_i64
from ..alloc import mm_alloc
from ..layout import (
    ATTR,
    B_COPY_TO_DAUGHTER,
    B_FLAGS,
    BEH,
    BEHAVIOR_WORDS,
    C_ADD_N,
    C_BEH_RUNS,
    IP_MM_KIND,
    IP_RUN_BEH,
    IP_RUN_MECH,
    IP_SEED,
    KIND_CLUSTER,
    KIND_GROW_DIVIDE,
    KIND_RANDOM_WALK,
    MAX_BEHAVIORS,
    NBEH,
    NEW,
    THRESH,
    TYPE,
    UID,
)
from ..mechanics import mechanics_one
from .agent import init_record
from .behavior import cluster_move, grow_divide, random_walk


@njit(nogil=True, cache=True)
def make_daughter(mother, out, kind, st, bl, g, apid, bpid, tid):
    d = mm_alloc(kind, st, bl, g, apid, tid)
    if d == 0:
        return 0
    init_record(d, -1, out[0], out[1], out[2], out[3], load_i64(mother + 8 * TYPE), load_f64(mother + 8 * THRESH),
                load_f64(mother + 8 * ATTR), load_f64(mother + 8 * (ATTR + 1)), NEW)
    nb = 0
    for k in range(load_i64(mother + 8 * NBEH)):
        b = load_i64(mother + 8 * (BEH + k))
        if load_i64(b + 8 * B_FLAGS) & B_COPY_TO_DAUGHTER:
            c = mm_alloc(kind, st, bl, g, bpid, tid)
            copy_words(c, b, BEHAVIOR_WORDS)
            store_i64(d + 8 * (BEH + nb), c)
            nb += 1
    store_i64(d + 8 * NBEH, nb)
    return d


@njit(nogil=True, cache=True)
def run_builtin(a, b, env, fp, ip, self_flat, mm_st, mm_bl, mm_g, apid, bpid, tid, add_addr, add_parent, add_seq,
                dn, out, buf):
    """One built-in behavior on one agent.  Returns the query buffer (it may grow)."""
    kind = load_i64(b)
    if kind == KIND_GROW_DIVIDE:
        if grow_divide(a, b, ip[IP_SEED], out):
            d = make_daughter(a, out, ip[IP_MM_KIND], mm_st, mm_bl, mm_g, apid, bpid, tid)
            k = dn[0]
            add_addr[k] = d
            add_parent[k] = load_i64(a + 8 * UID)
            add_seq[k] = np.int64(out[4])
            dn[0] = k + 1
    elif kind == KIND_CLUSTER:
        buf = cluster_move(a, b, env, fp, self_flat, buf)
    elif kind == KIND_RANDOM_WALK:
        random_walk(a, b, ip[IP_SEED])
    return buf


@njit(nogil=True, cache=True)
def agent_block(addrs, start, end, flat_base, env, fp, ip, mm_st, mm_bl, mm_g, apid, bpid, tid, add_addr,
                add_parent, add_seq, dn, counters):
    """Apply the due built-in agent operations to ``addrs[start:end]``.

    Returns the index where processing stopped; less than ``end`` when the
    staging arrays need to grow before the next agent.
    """
    out = np.empty(5)
    buf = np.empty(64, dtype=np.int64)
    cap = add_addr.shape[0]
    for i in range(start, end):
        a = addrs[i]
        if ip[IP_RUN_BEH] != 0:
            if cap - dn[0] < MAX_BEHAVIORS:
                return i
            for k in range(load_i64(a + 8 * NBEH)):
                counters[C_BEH_RUNS] += 1
                buf = run_builtin(a, load_i64(a + 8 * (BEH + k)), env, fp, ip, flat_base + i, mm_st, mm_bl, mm_g,
                                  apid, bpid, tid, add_addr, add_parent, add_seq, dn, out, buf)
        if ip[IP_RUN_MECH] != 0:
            buf = mechanics_one(a, flat_base + i, env, fp, ip, counters, buf)
    counters[C_ADD_N] = dn[0]
    return end
