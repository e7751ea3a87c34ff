"""Neighbor queries usable from inside numba kernels.

Every environment exports the same tuple, so kernels compile once::

    (kind, ints2d, ints1d, floats2d, meta, fmeta, flat_addr)

``flat_addr[i]`` is the record address of the agent with flat index ``i``
(domains concatenated in order).  Queries write neighbor flat indices into
``buf`` and return the total count; when the count exceeds ``len(buf)`` the
caller retries with a larger buffer (see :func:`query_grow`).
"""

import math

import numpy as np
from numba import njit

from .._mem import load_f64
from ..layout import POS

KIND_GRID = 0
KIND_BRUTE = 1
KIND_KDTREE = 2

# grid meta layout
GM_TS = 0
GM_DIMS = 1  # 3 entries
GM_N = 4
GM_ND = 5
GM_DOMOFF = 8  # domain offsets follow
GF_ORIGIN = 0  # 3 entries
GF_BOX = 3

INDEX_BITS = np.int64(32)
INDEX_MASK = np.int64(0xFFFFFFFF)
EMPTY = np.int64(-1)

_PX = 8 * POS
_PY = 8 * (POS + 1)
_PZ = 8 * (POS + 2)


@njit(nogil=True, cache=True, inline="always")
def pack(domain, index):
    return (np.int64(domain) << INDEX_BITS) | np.int64(index)


@njit(nogil=True, cache=True)
def grid_box_coords(meta, fmeta, x, y, z):
    bl = fmeta[GF_BOX]
    bx = int(math.floor((x - fmeta[0]) / bl))
    by = int(math.floor((y - fmeta[1]) / bl))
    bz = int(math.floor((z - fmeta[2]) / bl))
    bx = min(max(bx, 0), meta[GM_DIMS] - 1)
    by = min(max(by, 0), meta[GM_DIMS + 1] - 1)
    bz = min(max(bz, 0), meta[GM_DIMS + 2] - 1)
    return bx, by, bz


@njit(nogil=True, cache=True)
def _grid_query(env, x, y, z, r2, self_flat, buf):
    boxes = env[1]
    succ = env[2]
    meta = env[4]
    fmeta = env[5]
    flat_addr = env[6]
    ts = meta[GM_TS]
    dx = meta[GM_DIMS]
    dy = meta[GM_DIMS + 1]
    dz = meta[GM_DIMS + 2]
    bx, by, bz = grid_box_coords(meta, fmeta, x, y, z)
    cap = buf.shape[0]
    n = 0
    for k in range(max(bz - 1, 0), min(bz + 2, dz)):
        for j in range(max(by - 1, 0), min(by + 2, dy)):
            row = (k * dy + j) * dx
            for i in range(max(bx - 1, 0), min(bx + 2, dx)):
                b = row + i
                if boxes[b, 2] != ts:
                    continue
                w = boxes[b, 0]
                for _ in range(boxes[b, 1]):
                    flat = meta[GM_DOMOFF + (w >> INDEX_BITS)] + (w & INDEX_MASK)
                    if flat != self_flat:
                        a = flat_addr[flat]
                        ex = load_f64(a + _PX) - x
                        ey = load_f64(a + _PY) - y
                        ez = load_f64(a + _PZ) - z
                        if ex * ex + ey * ey + ez * ez <= r2:
                            if n < cap:
                                buf[n] = flat
                            n += 1
                    w = succ[flat]
    return n


@njit(nogil=True, cache=True)
def _brute_query(env, x, y, z, r2, self_flat, buf):
    flat_addr = env[6]
    cap = buf.shape[0]
    n = 0
    for flat in range(flat_addr.shape[0]):
        if flat == self_flat:
            continue
        a = flat_addr[flat]
        ex = load_f64(a + _PX) - x
        ey = load_f64(a + _PY) - y
        ez = load_f64(a + _PZ) - z
        if ex * ex + ey * ey + ez * ez <= r2:
            if n < cap:
                buf[n] = flat
            n += 1
    return n


@njit(nogil=True, cache=True)
def _kd_query(env, x, y, z, r2, self_flat, buf):
    nodes = env[1]  # lo, hi, left, right
    perm = env[2]
    bbox = env[3]  # xmin, ymin, zmin, xmax, ymax, zmax
    flat_addr = env[6]
    cap = buf.shape[0]
    n = 0
    if flat_addr.shape[0] == 0:
        return 0
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        d2 = 0.0
        for ax in range(3):
            c = (x, y, z)[ax]
            if c < bbox[node, ax]:
                t = bbox[node, ax] - c
                d2 += t * t
            elif c > bbox[node, ax + 3]:
                t = c - bbox[node, ax + 3]
                d2 += t * t
        if d2 > r2:
            continue
        left = nodes[node, 2]
        if left < 0:
            for p in range(nodes[node, 0], nodes[node, 1]):
                flat = perm[p]
                if flat == self_flat:
                    continue
                a = flat_addr[flat]
                ex = load_f64(a + _PX) - x
                ey = load_f64(a + _PY) - y
                ez = load_f64(a + _PZ) - z
                if ex * ex + ey * ey + ez * ez <= r2:
                    if n < cap:
                        buf[n] = flat
                    n += 1
        else:
            stack[top] = left
            stack[top + 1] = nodes[node, 3]
            top += 2
    return n


@njit(nogil=True, cache=True)
def env_query(env, x, y, z, r2, self_flat, buf):
    kind = env[0]
    if kind == KIND_GRID:
        return _grid_query(env, x, y, z, r2, self_flat, buf)
    if kind == KIND_KDTREE:
        return _kd_query(env, x, y, z, r2, self_flat, buf)
    return _brute_query(env, x, y, z, r2, self_flat, buf)


@njit(nogil=True, cache=True)
def query_grow(env, x, y, z, r2, self_flat, buf):
    """Query, enlarging ``buf`` until every neighbor fits.  Returns (count, buf)."""
    n = env_query(env, x, y, z, r2, self_flat, buf)
    if n > buf.shape[0]:
        buf = np.empty(2 * n, dtype=np.int64)
        n = env_query(env, x, y, z, r2, self_flat, buf)
    return n, buf


@njit(cache=True)
def query_all(env, x, y, z, r2, self_flat):
    buf = np.empty(64, dtype=np.int64)
    n, buf = query_grow(env, x, y, z, r2, self_flat, buf)
    return buf[:n].copy()
