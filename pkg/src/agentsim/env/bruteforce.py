from __future__ import annotations

import numpy as np

from .base import Environment, _EMPTY_F2, _EMPTY_I2
from .query import KIND_BRUTE

_NO_INTS = np.zeros(0, dtype=np.int64)


class BruteForce(Environment):
    """Exhaustive O(n) scan per query; the test oracle."""

    name = "brute_force"

    def __init__(self):
        super().__init__()
        self._meta = np.zeros(1, dtype=np.int64)
        self._fmeta = np.zeros(1)

    def _build(self, pool, chunks) -> None:
        pass

    def data(self) -> tuple:
        return (KIND_BRUTE, _EMPTY_I2, _NO_INTS, _EMPTY_F2, self._meta, self._fmeta, self.flat_addr)


def bf_for_each_neighbor(env: BruteForce, query, squared_radius: float, visitor) -> None:
    env.for_each_neighbor(query, squared_radius, visitor)
