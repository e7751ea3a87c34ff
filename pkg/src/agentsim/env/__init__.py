from .base import Environment
from .bruteforce import BruteForce, bf_for_each_neighbor
from .grid import UniformGrid, grid_box_coordinates, grid_for_each_neighbor, grid_update
from .kdtree import KDTree
from .query import KIND_BRUTE, KIND_GRID, KIND_KDTREE, env_query, query_all, query_grow

ENVIRONMENTS = {"uniform_grid": UniformGrid, "brute_force": BruteForce, "kdtree": KDTree}


def make_environment(kind: str, **kwargs) -> Environment:
    try:
        cls = ENVIRONMENTS[kind]
    except KeyError:
        raise ValueError(f"unknown environment kind {kind!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**kwargs)


__all__ = [
    "ENVIRONMENTS",
    "BruteForce",
    "Environment",
    "KDTree",
    "UniformGrid",
    "bf_for_each_neighbor",
    "env_query",
    "grid_box_coordinates",
    "grid_for_each_neighbor",
    "grid_update",
    "make_environment",
    "query_all",
    "query_grow",
    "KIND_BRUTE",
    "KIND_GRID",
    "KIND_KDTREE",
]
