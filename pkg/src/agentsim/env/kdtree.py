"""Median-split kd-tree, rebuilt on every update (baseline for comparisons)."""

from __future__ import annotations

import numpy as np
from numba import njit

from .._mem import load_f64
from ..layout import POS
from .base import Environment
from .query import KIND_KDTREE

LEAF_SIZE = 16


@njit(nogil=True, cache=True)
def _gather(flat_addr):
    n = flat_addr.shape[0]
    pts = np.empty((n, 3))
    for i in range(n):
        for ax in range(3):
            pts[i, ax] = load_f64(flat_addr[i] + 8 * (POS + ax))
    return pts


@njit(nogil=True, cache=True)
def _build_tree(pts, leaf_size):
    n = pts.shape[0]
    perm = np.arange(n)
    cap = max(1, 4 * (n // leaf_size + 1))
    nodes = np.full((cap, 4), -1, dtype=np.int64)
    bbox = np.zeros((cap, 6))
    stack = np.empty(256, dtype=np.int64)
    nodes[0, 0] = 0
    nodes[0, 1] = n
    m = 1
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        lo = nodes[node, 0]
        hi = nodes[node, 1]
        for ax in range(3):
            bbox[node, ax] = np.inf
            bbox[node, ax + 3] = -np.inf
        for p in range(lo, hi):
            for ax in range(3):
                c = pts[perm[p], ax]
                bbox[node, ax] = min(bbox[node, ax], c)
                bbox[node, ax + 3] = max(bbox[node, ax + 3], c)
        if hi - lo <= leaf_size:
            continue
        ext = bbox[node, 3:6] - bbox[node, 0:3]
        axis = int(np.argmax(ext))
        sub = perm[lo:hi].copy()
        order = np.argsort(pts[sub, axis], kind="mergesort")
        perm[lo:hi] = sub[order]
        mid = (lo + hi) // 2
        left = m
        right = m + 1
        m += 2
        nodes[left, 0] = lo
        nodes[left, 1] = mid
        nodes[right, 0] = mid
        nodes[right, 1] = hi
        nodes[node, 2] = left
        nodes[node, 3] = right
        stack[top] = left
        stack[top + 1] = right
        top += 2
    return nodes[:m].copy(), perm, bbox[:m].copy()


class KDTree(Environment):
    name = "kdtree"

    def __init__(self, leaf_size: int = LEAF_SIZE):
        super().__init__()
        self.leaf_size = leaf_size
        self._tree = _build_tree(np.zeros((0, 3)), leaf_size)
        self._meta = np.zeros(1, dtype=np.int64)
        self._fmeta = np.zeros(1)

    def _build(self, pool, chunks) -> None:
        self._tree = _build_tree(_gather(self.flat_addr), self.leaf_size)

    def data(self) -> tuple:
        nodes, perm, bbox = self._tree
        return (KIND_KDTREE, nodes, perm, bbox, self._meta, self._fmeta, self.flat_addr)
