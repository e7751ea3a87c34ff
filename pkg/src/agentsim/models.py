"""Benchmark models.

Each ``model_*`` function returns a callable that populates a fresh
:class:`~agentsim.core.scheduler.Simulation`.  Growth rates and thresholds
are documented defaults chosen for desk-scale runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core.behavior import ClusterMove, GrowDivide

LATTICE_SPACING = 20.0
CELL_DIAMETER = 10.0


@dataclass
class ModelInit:
    name: str
    agents: int
    build: Callable = field(repr=False)

    def __call__(self, sim) -> None:
        self.build(sim)


def lattice(side: int, spacing: float) -> np.ndarray:
    g = np.indices((side, side, side)).reshape(3, -1).T
    return g.astype(float) * spacing


def model_proliferation(n: int, growth_rate: float = 0.5, division_diameter: float = 12.5,
                        diameter: float = CELL_DIAMETER, spacing: float = LATTICE_SPACING) -> ModelInit:
    """Cells on a regular cubic lattice, ``ceil(n ** (1/3))`` per axis, each growing and dividing."""
    if n < 0:
        raise ValueError("n must be >= 0")
    side = _cube_side(n)
    behavior = GrowDivide(growth_rate, division_diameter)

    def build(sim) -> None:
        pos = lattice(side, spacing)
        sim.rm.push_back_many(pos, np.full(len(pos), diameter), [behavior])

    return ModelInit("proliferation", side**3, build)


def _cube_side(n: int) -> int:
    if n == 0:
        return 0
    s = round(n ** (1 / 3))
    while s**3 < n:
        s += 1
    while s > 1 and (s - 1) ** 3 >= n:
        s -= 1
    return s


def model_clustering(n: int, density: float = 7.2e-4, step: float = 0.1, radius: float = 15.0,
                     diameter: float = CELL_DIAMETER, seed: int = 0) -> ModelInit:
    """``n`` cells of two types, uniformly random in a cube, drifting toward same-type neighbors."""
    if n < 2:
        raise ValueError("clustering needs at least 2 agents")
    side = (n / density) ** (1 / 3)
    behavior = ClusterMove(step, radius)

    def build(sim) -> None:
        rng = np.random.default_rng(seed)
        pos = rng.uniform(0.0, side, size=(n, 3))
        types = rng.integers(0, 2, size=n)
        sim.rm.push_back_many(pos, np.full(n, diameter), [behavior], agent_types=types)

    return ModelInit("clustering", n, build)


def slab_shape(n: int) -> tuple[int, int, int]:
    thickness = max(2, round(n ** (1 / 3) / 2))
    width = max(1, math.ceil(math.sqrt(n / thickness)))
    return width, width, thickness


def model_static_front(n: int, growth_rate: float = 0.5, division_diameter: float = 12.5,
                       column_height: int = 3, diameter: float = CELL_DIAMETER,
                       adhesion: float = 0.5) -> ModelInit:
    """A settled slab of ``n`` touching cells plus one growing column on its top face.

    Slab cells sit exactly one diameter apart, so every pairwise force is
    zero.  ``adhesion`` is their force threshold: small pushes do not move
    them, which keeps the active region near the column.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    wx, wy, wz = slab_shape(n)

    def build(sim) -> None:
        idx = np.indices((wx, wy, wz)).reshape(3, -1).T[:n]
        slab = idx.astype(float) * diameter
        sim.rm.push_back_many(slab, np.full(n, diameter), [], force_thresholds=np.full(n, adhesion))
        if column_height > 0:
            cx, cy = (wx // 2) * diameter, (wy // 2) * diameter
            top = (wz - 1) * diameter
            col = np.array([[cx, cy, top + (k + 1) * diameter] for k in range(column_height)])
            beh = [GrowDivide(growth_rate, division_diameter)] if growth_rate > 0 else []
            sim.rm.push_back_many(col, np.full(column_height, diameter), beh,
                                  agent_types=np.ones(column_height, dtype=np.int64))

    return ModelInit("static_front", n + column_height, build)


MODELS: dict[str, Callable[..., ModelInit]] = {
    "proliferation": model_proliferation,
    "clustering": model_clustering,
    "static_front": model_static_front,
}


def make_model(name: str, agents: int, seed: int = 0, **kwargs) -> ModelInit:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    if name == "clustering":
        kwargs.setdefault("seed", seed)
    return factory(agents, **kwargs)
