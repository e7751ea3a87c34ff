"""Uniform grid with timestamped boxes.

Boxes store (head, count, timestamp) and the agents of a box form a linked
list threaded through ``successors``, indexed like the resource manager.
A box whose timestamp differs from the grid's is empty, so a rebuild never
touches boxes without agents and costs O(#agents).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .._mem import atomic_add, atomic_xchg, load_f64
from ..layout import POS
from .base import Environment, _EMPTY_F2
from .query import EMPTY, GF_BOX, GM_DIMS, GM_DOMOFF, GM_N, GM_ND, GM_TS, KIND_GRID, grid_box_coords, pack

MAX_BOXES = 1 << 26


@njit(nogil=True, cache=True)
def _reset_touched(flat_addr, lo, hi, meta, fmeta, boxes, agent_box):
    ts = meta[GM_TS]
    dx = meta[GM_DIMS]
    dy = meta[GM_DIMS + 1]
    for i in range(lo, hi):
        a = flat_addr[i]
        bx, by, bz = grid_box_coords(
            meta, fmeta, load_f64(a + 8 * POS), load_f64(a + 8 * (POS + 1)), load_f64(a + 8 * (POS + 2))
        )
        b = (bz * dy + by) * dx + bx
        agent_box[i] = b
        # identical writes from several threads are harmless; inserts start after the barrier
        if boxes[b, 2] != ts:
            boxes[b, 0] = EMPTY
            boxes[b, 1] = 0
            boxes[b, 2] = ts


@njit(nogil=True, cache=True)
def _insert(lo, hi, offsets, agent_box, boxes, successors):
    d = 0
    while lo >= offsets[d + 1]:
        d += 1
    for i in range(lo, hi):
        while i >= offsets[d + 1]:
            d += 1
        b = agent_box[i]
        successors[i] = atomic_xchg(boxes, 3 * b, pack(d, i - offsets[d]))
        atomic_add(boxes, 3 * b + 1, 1)


class UniformGrid(Environment):
    """Uniform grid neighbor search.

    ``box_length`` is ``"auto"`` (largest agent diameter, recomputed on every
    update) or a fixed length.  ``fixed_bounds=(lower, upper)`` pins the grid
    volume instead of deriving it from the agents.
    """

    name = "uniform_grid"

    def __init__(self, box_length="auto", fixed_bounds=None):
        super().__init__()
        if box_length != "auto" and not float(box_length) > 0:
            raise ValueError("box_length must be 'auto' or positive")
        self.box_length_policy = box_length
        self.fixed_bounds = None
        if fixed_bounds is not None:
            lo, hi = (np.asarray(v, dtype=float) for v in fixed_bounds)
            self.fixed_bounds = (lo, hi)
        self.box_length = 1.0
        self.origin = np.zeros(3)
        self.dims = np.ones(3, dtype=np.int64)
        self.grid_timestamp = 0
        self.boxes = np.zeros((1, 3), dtype=np.int64)
        self.successors = np.zeros(0, dtype=np.int64)
        self.agent_box = np.zeros(0, dtype=np.int64)
        self.meta = np.zeros(GM_DOMOFF + 1, dtype=np.int64)
        self.fmeta = np.zeros(4)

    @property
    def n_boxes(self) -> int:
        return int(np.prod(self.dims))

    @property
    def max_squared_radius(self) -> float:
        return self.box_length**2

    def configure(self, origin, dims, box_length) -> None:
        """Set the grid geometry directly (no agents inserted)."""
        self.origin = np.asarray(origin, dtype=float)
        self.dims = np.asarray(dims, dtype=np.int64)
        self.box_length = float(box_length)
        self._write_meta(0, 1)

    def _write_meta(self, n: int, nd: int) -> None:
        meta = np.zeros(GM_DOMOFF + len(self.domain_offsets), dtype=np.int64)
        meta[GM_TS] = self.grid_timestamp
        meta[GM_DIMS:GM_DIMS + 3] = self.dims
        meta[GM_N] = n
        meta[GM_ND] = nd
        meta[GM_DOMOFF:] = self.domain_offsets
        self.meta = meta
        self.fmeta = np.array([*self.origin, self.box_length])

    def _geometry(self) -> None:
        dmax = self.largest_agent_diameter
        if self.box_length_policy == "auto":
            bl = max(dmax, self.min_search_radius)
            bl = bl if bl > 0 else 1.0
        else:
            bl = float(self.box_length_policy)
            if bl < max(dmax, self.min_search_radius):
                raise ValueError(f"fixed box length {bl} is smaller than the largest agent diameter "
                                 f"or behavior search radius")
        if self.fixed_bounds is not None:
            lo, hi = self.fixed_bounds
            lo = np.minimum(lo, self.lower)
            hi = np.maximum(hi, self.upper)
        else:
            lo, hi = self.lower, self.upper
        dims = np.floor((hi - lo) / bl).astype(np.int64) + 1
        dims = np.maximum(dims, 1)
        if int(np.prod(dims.astype(float))) >= MAX_BOXES:
            raise ValueError(f"grid of {dims.tolist()} boxes is too large")
        self.box_length = bl
        self.origin = lo.astype(float)
        self.dims = dims

    def _build(self, pool, chunks) -> None:
        self._geometry()
        self.grid_timestamp += 1
        n = self.flat_addr.shape[0]
        nd = len(self.domain_offsets) - 1
        self._write_meta(n, nd)
        nbox = self.n_boxes
        if self.boxes.shape[0] < nbox:
            # zero timestamps mark every new box stale; grown once, never cleared
            self.boxes = np.zeros((nbox, 3), dtype=np.int64)
        if self.successors.shape[0] < n:
            self.successors = np.empty(max(n, 2 * self.successors.shape[0]), dtype=np.int64)
            self.agent_box = np.empty_like(self.successors)
        flat, meta, fmeta = self.flat_addr, self.meta, self.fmeta
        boxes, agent_box, succ = self.boxes, self.agent_box, self.successors
        offsets = self.domain_offsets

        def reset(tid: int) -> None:
            lo, hi = chunks[tid]
            _reset_touched(flat, lo, hi, meta, fmeta, boxes, agent_box)

        def insert(tid: int) -> None:
            lo, hi = chunks[tid]
            if hi > lo:
                _insert(lo, hi, offsets, agent_box, boxes, succ)

        if pool is not None:
            pool.run(reset)
            pool.run(insert)
        else:
            reset(0)
            insert(0)

    def data(self) -> tuple:
        return (KIND_GRID, self.boxes, self.successors, _EMPTY_F2, self.meta, self.fmeta, self.flat_addr)

    # inspection helpers

    def box_coordinates(self, position) -> tuple[int, int, int]:
        x, y, z = (float(c) for c in position)
        return tuple(int(v) for v in grid_box_coords(self.meta, self.fmeta, x, y, z))

    def box_index(self, coords) -> int:
        bx, by, bz = coords
        return int((bz * self.dims[1] + by) * self.dims[0] + bx)

    def box_is_current(self, b: int) -> bool:
        return bool(self.boxes[b, 2] == self.grid_timestamp)

    def box_count(self, b: int) -> int:
        return int(self.boxes[b, 1]) if self.box_is_current(b) else 0

    def box_agents(self, b: int) -> list[int]:
        """Flat indices stored in box ``b`` (empty when the box is stale)."""
        if not self.box_is_current(b):
            return []
        out = []
        w = int(self.boxes[b, 0])
        for _ in range(int(self.boxes[b, 1])):
            flat = int(self.domain_offsets[w >> 32] + (w & 0xFFFFFFFF))
            out.append(flat)
            w = int(self.successors[flat])
        return out

    def current_box_ids(self) -> np.ndarray:
        nbox = self.n_boxes
        return np.nonzero(self.boxes[:nbox, 2] == self.grid_timestamp)[0]


def grid_box_coordinates(grid: UniformGrid, position) -> tuple[int, int, int]:
    return grid.box_coordinates(position)


def grid_for_each_neighbor(grid: UniformGrid, query, squared_radius: float, visitor) -> None:
    grid.for_each_neighbor(query, squared_radius, visitor)


def grid_update(grid: UniformGrid, rm, pool=None) -> None:
    grid.update(rm, pool)


def auto_dims(lower, upper, box_length: float) -> np.ndarray:
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    return np.maximum(np.floor((upper - lower) / box_length).astype(np.int64) + 1, 1)


def boxes_for_volume(lower, upper, box_length: float) -> int:
    return int(math.prod(int(d) for d in auto_dims(lower, upper, box_length)))
