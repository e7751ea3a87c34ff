from __future__ import annotations

from dataclasses import asdict, dataclass, fields

ENVIRONMENT_KINDS = ("uniform_grid", "brute_force", "kdtree")
ALLOCATOR_KINDS = ("pool", "system")


@dataclass
class SimulationParams:
    box_length_policy: str | float = "auto"
    sorting_frequency: int = 0
    detect_static_agents: bool = False
    environment_kind: str = "uniform_grid"
    thread_count: int | None = None
    domain_count: int | None = None
    allocator_kind: str = "pool"
    mem_mgr_growth_rate: float = 2.0
    mem_mgr_aligned_pages_shift: int = 5
    mem_mgr_migration_threshold: int = 1 << 20
    use_extra_memory_during_sort: bool = True
    simulation_time_step: float = 0.05
    repulsion_coefficient: float = 1.0
    max_displacement: float = 3.0
    force_threshold: float = 0.0
    block_size: int = 256
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        if self.box_length_policy != "auto":
            try:
                self.box_length_policy = float(self.box_length_policy)
            except (TypeError, ValueError):
                raise ValueError("box_length_policy must be 'auto' or a positive number") from None
            if not self.box_length_policy > 0:
                raise ValueError("box_length_policy must be 'auto' or a positive number")
        if int(self.sorting_frequency) != self.sorting_frequency or self.sorting_frequency < 0:
            raise ValueError("sorting_frequency must be an integer >= 0")
        if self.environment_kind not in ENVIRONMENT_KINDS:
            raise ValueError(f"environment_kind must be one of {ENVIRONMENT_KINDS}")
        if self.allocator_kind not in ALLOCATOR_KINDS:
            raise ValueError(f"allocator_kind must be one of {ALLOCATOR_KINDS}")
        if self.thread_count is not None and self.thread_count < 1:
            raise ValueError("thread_count must be >= 1")
        if self.domain_count is not None and self.domain_count < 1:
            raise ValueError("domain_count must be >= 1")
        if not self.mem_mgr_growth_rate > 1:
            raise ValueError("mem_mgr_growth_rate must be > 1")
        if int(self.mem_mgr_aligned_pages_shift) != self.mem_mgr_aligned_pages_shift or self.mem_mgr_aligned_pages_shift < 0:
            raise ValueError("mem_mgr_aligned_pages_shift must be an integer >= 0")
        if self.mem_mgr_migration_threshold < 1:
            raise ValueError("mem_mgr_migration_threshold must be >= 1")
        for name in ("simulation_time_step", "repulsion_coefficient", "max_displacement"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.force_threshold < 0:
            raise ValueError("force_threshold must be >= 0")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def force_params(self):
        from ..mechanics import ForceParams

        return ForceParams(self.repulsion_coefficient, self.max_displacement, self.force_threshold,
                           self.simulation_time_step)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]
