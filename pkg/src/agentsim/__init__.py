"""Parallel agent-based simulation engine with a pool allocator, uniform-grid neighbor search and Morton sorting."""

from .core.agent import Agent, AgentHandle
from .core.behavior import Behavior, ClusterMove, GrowDivide, RandomWalk
from .core.params import SimulationParams
from .core.scheduler import Operation, Simulation, SimulationError, SimulationReport, run_simulation
from .models import model_clustering, model_proliferation, model_static_front

__version__ = "0.1.0"

__all__ = [
    "Agent",
    "AgentHandle",
    "Behavior",
    "ClusterMove",
    "GrowDivide",
    "Operation",
    "RandomWalk",
    "Simulation",
    "SimulationError",
    "SimulationParams",
    "SimulationReport",
    "model_clustering",
    "model_proliferation",
    "model_static_front",
    "run_simulation",
]
