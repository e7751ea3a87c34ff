"""Per-iteration scheduler.

Each iteration runs the due pre operations (environment update, optional
sort and balance, staticness propagation, user operations), then the
parallel agent loop, then the mid operations, then the post operations
(integration of pending displacements and diameters, commit of staged
removals and additions, user operations).  The parallel regions end with a
barrier, so standalone operations always see a quiescent pool.
"""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ..alloc import P_MIGRATIONS, MemoryManager
from ..commit import ThreadLocalDelta, commit_additions, commit_removals
from ..env import UniformGrid, make_environment
from ..execution import DEFAULT_BLOCK_SIZE, BlockLoopError, WorkerPool, detect_topology, for_each_block_parallel
from ..layout import (
    C_FORCE_EVALS,
    C_MECH_RUNS,
    C_STATIC_SKIPS,
    C_WORDS,
    IP_DETECT,
    IP_ITER,
    IP_MM_KIND,
    IP_RUN_BEH,
    IP_RUN_MECH,
    IP_SEED,
    IP_WORDS,
    MAX_BEHAVIORS,
    PY_KIND_BASE,
)
from ..mechanics import force_param_array, integrate_chunk, propagate_chunk
from .agent import Agent, AgentRecord
from .behavior import BehaviorContext, NeighborLocks
from .loop import agent_block, run_builtin
from .params import SimulationParams
from .resource_manager import ResourceManager

AGENT_OP = "agent_op"
STANDALONE_PRE = "standalone_pre"
STANDALONE_MID = "standalone_mid"
STANDALONE_POST = "standalone_post"
OP_KINDS = (AGENT_OP, STANDALONE_PRE, STANDALONE_MID, STANDALONE_POST)

CATEGORIES = ("agent_ops", "environment", "sorting", "commit", "standalone", "setup_teardown")


class SimulationError(RuntimeError):
    def __init__(self, iteration: int, operation: str, cause: BaseException):
        self.iteration = iteration
        self.operation = operation
        self.cause = cause
        super().__init__(f"iteration {iteration}, operation {operation!r}: {cause!r}")


@dataclass
class Operation:
    name: str
    kind: str
    frequency: int = 1
    fn: Callable | None = None
    category: str = "standalone"

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"operation kind must be one of {OP_KINDS}")
        if int(self.frequency) != self.frequency or self.frequency < 1:
            raise ValueError("operation frequency must be an integer >= 1")
        if self.category not in CATEGORIES:
            raise ValueError(f"category must be one of {CATEGORIES}")

    def due(self, iteration: int) -> bool:
        return iteration % self.frequency == 0


def resident_bytes() -> int:
    try:
        with open("/proc/self/statm") as fh:
            return int(fh.read().split()[1]) * os.sysconf("SC_PAGE_SIZE")
    except (OSError, ValueError, IndexError):
        import resource

        return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


@dataclass
class SimulationReport:
    iterations: int
    final_agents: int
    wall_ms_total: float
    category_ms: dict[str, float]
    operation_ms: dict[str, float]
    operation_runs: dict[str, int]
    iteration_ms: list[float]
    peak_rss_bytes: int
    rss_baseline_bytes: int
    counters: dict[str, int]
    threads: int
    domains: int
    params: dict = field(default_factory=dict)

    @property
    def rss_delta_bytes(self) -> int:
        return self.peak_rss_bytes - self.rss_baseline_bytes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rss_delta_bytes"] = self.rss_delta_bytes
        return d


class Simulation:
    """Engine state for one run: worker pool, memory, agents, environment and operations."""

    def __init__(self, params: SimulationParams | None = None, topology=None):
        t0 = time.perf_counter()
        self.params = params = params or SimulationParams()
        self.rss_baseline = resident_bytes()
        self.peak_rss = self.rss_baseline
        self.topology = topology or detect_topology(params.thread_count, params.domain_count)
        self.pool = WorkerPool(self.topology)
        self.memory = MemoryManager(
            params.allocator_kind,
            self.topology.domain_count,
            growth_rate=params.mem_mgr_growth_rate,
            aligned_pages_shift=params.mem_mgr_aligned_pages_shift,
            migration_threshold=params.mem_mgr_migration_threshold,
            debug=params.debug,
        )
        self.rm = ResourceManager(self.memory, self.topology.domain_count, params.seed)
        kwargs = {"box_length": params.box_length_policy} if params.environment_kind == "uniform_grid" else {}
        self.environment = make_environment(params.environment_kind, **kwargs)
        self._sort_grid = self.environment if isinstance(self.environment, UniformGrid) else UniformGrid()
        self.force_params = params.force_params()
        n = self.pool.size
        self.deltas = [ThreadLocalDelta(4 * MAX_BEHAVIORS * DEFAULT_BLOCK_SIZE) for _ in range(n)]
        self.counters = np.zeros((n, C_WORDS), dtype=np.int64)
        self.worker_domains = self.topology.domain_of_thread()
        self.neighbor_locks = NeighborLocks()
        self.iteration = 0
        self.operations: list[Operation] = []
        self.category_ms = dict.fromkeys(CATEGORIES, 0.0)
        self.operation_ms: dict[str, float] = {}
        self.operation_runs: dict[str, int] = {}
        self.iteration_ms: list[float] = []
        self.loop_stats = {"steals_local": 0, "steals_remote": 0, "blocks": 0}
        self.last_sort = None
        self._register_builtin()
        self.category_ms["setup_teardown"] += 1e3 * (time.perf_counter() - t0)
        self._closed = False

    # operations

    def _register_builtin(self) -> None:
        p = self.params
        self.operations += [
            Operation("update_environment", STANDALONE_PRE, 1, self._update_environment, "environment"),
        ]
        if p.sorting_frequency > 0:
            self.operations.append(
                Operation("sort_and_balance", STANDALONE_PRE, p.sorting_frequency, self._sort, "sorting"))
        if p.detect_static_agents:
            self.operations.append(
                Operation("propagate_staticness", STANDALONE_PRE, 1, self._propagate, "standalone"))
        self.operations += [
            Operation("behaviors", AGENT_OP, 1, None, "agent_ops"),
            Operation("mechanical_forces", AGENT_OP, 1, None, "agent_ops"),
            Operation("integrate", STANDALONE_POST, 1, self._integrate, "standalone"),
            Operation("commit", STANDALONE_POST, 1, self._commit, "commit"),
        ]

    def add_operation(self, op: Operation) -> None:
        """Register a user operation.  Pre operations run after the built-in ones of their phase."""
        if any(o.name == op.name for o in self.operations):
            raise ValueError(f"operation {op.name!r} already registered")
        if op.kind == STANDALONE_PRE and self.params.detect_static_agents:
            # keep staticness propagation last among pre operations
            k = next(i for i, o in enumerate(self.operations) if o.name == "propagate_staticness")
            self.operations.insert(k, op)
        else:
            self.operations.append(op)

    def remove_operation(self, name: str) -> None:
        self.operations = [o for o in self.operations if o.name != name]

    def operation(self, name: str) -> Operation:
        for o in self.operations:
            if o.name == name:
                return o
        raise KeyError(name)

    # built-in standalone operations

    def _update_environment(self) -> None:
        self.environment.min_search_radius = self.rm.registry.search_radius
        self.environment.update(self.rm, self.pool)

    def _sort(self) -> None:
        from ..morton import sort_and_balance

        grid = self._sort_grid
        if grid is not self.environment:
            grid.min_search_radius = self.rm.registry.search_radius
            grid.update(self.rm, self.pool)
        self.last_sort = sort_and_balance(self.rm, grid, self.topology, self.pool,
                                          self.params.use_extra_memory_during_sort)
        t = time.perf_counter()
        self.environment.update(self.rm, self.pool)
        # the rebuild belongs to the environment category
        dt = 1e3 * (time.perf_counter() - t)
        self.category_ms["environment"] += dt
        self.category_ms["sorting"] -= dt

    def _chunks(self):
        flat, _ = self.rm.flat_addresses()
        return flat, self.pool.chunks(flat.shape[0])

    def _propagate(self) -> None:
        env = self.environment
        data = env.data()
        radius = env.interaction_radius
        chunks = self.pool.chunks(env.flat_addr.shape[0])

        def work(t: int) -> None:
            lo, hi = chunks[t]
            if hi > lo:
                propagate_chunk(data, lo, hi, radius)

        self.pool.run(work)

    def _integrate(self) -> None:
        flat, chunks = self._chunks()
        detect = self.params.detect_static_agents

        def work(t: int) -> None:
            lo, hi = chunks[t]
            if hi > lo:
                integrate_chunk(flat, lo, hi, detect)

        self.pool.run(work)

    def _commit(self) -> None:
        commit_removals(self.rm, self.deltas, self.pool, debug=True)
        commit_additions(self.rm, self.deltas, self.worker_domains, self.pool)

    # staging from custom behaviors

    def stage_new_agent(self, tid: int, domain: int, parent: AgentRecord | None, agent: Agent) -> None:
        from .._mem import poke_i64
        from ..layout import NEW, RNG

        if parent is not None:
            seq = parent.rng_counter
            poke_i64(parent.address + 8 * RNG, seq + 1)
            parent_uid = parent.uid
        else:
            seq, parent_uid = 0, -1
        addr = self.rm.new_record(agent, tid, domain, -1, NEW)
        self.deltas[tid].stage_add(addr, parent_uid, seq)

    def stage_removal(self, tid: int, record: AgentRecord) -> None:
        self.deltas[tid].stage_remove(self.rm.handle_of(record.uid))

    # the agent loop

    def _agent_loop(self, agent_ops: list[Operation]) -> None:
        names = {o.name for o in agent_ops}
        run_beh = "behaviors" in names
        run_mech = "mechanical_forces" in names
        user_ops = [o for o in agent_ops if o.fn is not None]
        rm, env = self.rm, self.environment
        if env.built_version != rm.version:
            raise RuntimeError("environment is stale; it must be updated before the agent loop")
        fp = force_param_array(self.force_params, env.interaction_radius)
        ip = np.zeros(IP_WORDS, dtype=np.int64)
        ip[IP_SEED] = self.params.seed
        ip[IP_DETECT] = int(self.params.detect_static_agents)
        ip[IP_MM_KIND] = self.memory.kind_code
        ip[IP_ITER] = self.iteration
        ip[IP_RUN_BEH] = int(run_beh)
        ip[IP_RUN_MECH] = int(run_mech)
        data = env.data()
        _, offsets = rm.flat_addresses()
        kind, st, bl, g = self.memory.kernel_args()
        apids = rm.agent_pool.pids
        bpids = rm.behavior_pool.pids
        python_path = bool(user_ops) or rm.registry.has_custom
        registry = rm.registry
        order = [o for o in agent_ops]

        def block_fn(tid: int, d: int, s: int, e: int) -> None:
            addrs = rm.domain_array(d)
            delta = self.deltas[tid]
            dom = self.worker_domains[tid]
            counters = self.counters[tid]
            delta.reserve_added(MAX_BEHAVIORS * (e - s))
            if not python_path:
                i = s
                while i < e:
                    i = agent_block(addrs, i, e, offsets[d], data, fp, ip, st, bl, g, apids[dom], bpids[dom], tid,
                                    delta.added_addr, delta.added_parent, delta.added_seq, delta.n, counters)
                    if i < e:
                        delta.reserve_added(MAX_BEHAVIORS * (e - i))
                return
            ctx = BehaviorContext(self, tid, dom)
            out = np.empty(5)
            buf = np.empty(64, dtype=np.int64)
            mech_ip = ip.copy()
            mech_ip[IP_RUN_BEH] = 0
            for i in range(s, e):
                a = int(addrs[i])
                rec = AgentRecord(a, rm)
                for op in order:
                    if op.name == "behaviors":
                        for b in rec.behavior_addresses:
                            k = int(_peek(b))
                            if k >= PY_KIND_BASE:
                                registry.get(k).run(rec, ctx)
                            else:
                                delta.reserve_added(MAX_BEHAVIORS)
                                buf = run_builtin(a, b, data, fp, ip, offsets[d] + i, st, bl, g, apids[dom],
                                                  bpids[dom], tid, delta.added_addr, delta.added_parent,
                                                  delta.added_seq, delta.n, out, buf)
                    elif op.name == "mechanical_forces":
                        from ..mechanics import mechanics_one

                        buf = mechanics_one(a, offsets[d] + i, data, fp, mech_ip, counters, buf)
                    elif op.fn is not None:
                        op.fn(rec, ctx)

        rm.in_parallel = True
        try:
            stats = for_each_block_parallel(self.pool, rm.domain_sizes(), block_fn, self.params.block_size)
        finally:
            rm.in_parallel = False
        self.loop_stats["steals_local"] += stats.steals_local
        self.loop_stats["steals_remote"] += stats.steals_remote
        self.loop_stats["blocks"] += stats.blocks

    # driver

    def _timed(self, op: Operation, fn) -> None:
        t = time.perf_counter()
        try:
            fn()
        except SimulationError:
            raise
        except BlockLoopError as exc:
            raise SimulationError(self.iteration, op.name, exc.errors[0][1]) from exc
        except Exception as exc:
            raise SimulationError(self.iteration, op.name, exc) from exc
        dt = 1e3 * (time.perf_counter() - t)
        self.category_ms[op.category] += dt
        self.operation_ms[op.name] = self.operation_ms.get(op.name, 0.0) + dt
        self.operation_runs[op.name] = self.operation_runs.get(op.name, 0) + 1

    def step(self) -> None:
        it = self.iteration
        t0 = time.perf_counter()
        due = [o for o in self.operations if o.due(it)]
        for op in due:
            if op.kind == STANDALONE_PRE:
                self._timed(op, op.fn)
        agent_ops = [o for o in due if o.kind == AGENT_OP]
        if agent_ops and self.rm.size:
            loop = Operation("agent_loop", AGENT_OP, 1, None, "agent_ops")
            self._timed(loop, lambda: self._agent_loop(agent_ops))
            for o in agent_ops:
                self.operation_runs[o.name] = self.operation_runs.get(o.name, 0) + 1
        elif agent_ops:
            for o in agent_ops:
                self.operation_runs[o.name] = self.operation_runs.get(o.name, 0) + 1
        for kind in (STANDALONE_MID, STANDALONE_POST):
            for op in due:
                if op.kind == kind:
                    self._timed(op, op.fn)
        self.iteration += 1
        self.iteration_ms.append(1e3 * (time.perf_counter() - t0))
        self.peak_rss = max(self.peak_rss, resident_bytes())

    def run(self, iterations: int) -> None:
        if iterations < 0:
            raise ValueError("iterations must be >= 0")
        for _ in range(iterations):
            self.step()

    def counter_totals(self) -> dict[str, int]:
        c = self.counters.sum(axis=0)
        nrows = self.memory._next_pid
        return {
            "force_evals": int(c[C_FORCE_EVALS]),
            "static_skips": int(c[C_STATIC_SKIPS]),
            "mechanics_runs": int(c[C_MECH_RUNS]),
            "steals": int(self.loop_stats["steals_local"] + self.loop_stats["steals_remote"]),
            "steals_local": int(self.loop_stats["steals_local"]),
            "steals_remote": int(self.loop_stats["steals_remote"]),
            "migrations": int(self.memory.state[:nrows, P_MIGRATIONS].sum()),
            "blocks": int(self.loop_stats["blocks"]),
        }

    def report(self, wall_ms_total: float | None = None) -> SimulationReport:
        total = wall_ms_total if wall_ms_total is not None else sum(self.category_ms.values())
        return SimulationReport(
            iterations=self.iteration,
            final_agents=self._final_size if self._closed else self.rm.size,
            wall_ms_total=total,
            category_ms=dict(self.category_ms),
            operation_ms=dict(self.operation_ms),
            operation_runs=dict(self.operation_runs),
            iteration_ms=list(self.iteration_ms),
            peak_rss_bytes=int(self.peak_rss),
            rss_baseline_bytes=int(self.rss_baseline),
            counters=self.counter_totals(),
            threads=self.pool.size,
            domains=self.topology.domain_count,
            params=self.params.as_dict(),
        )

    def snapshot(self) -> dict[str, np.ndarray]:
        return self.rm.snapshot()

    def close(self) -> None:
        if self._closed:
            return
        t = time.perf_counter()
        self._final_size = self.rm.size
        self.rm.close()
        self.memory.close()
        self.pool.close()
        self.category_ms["setup_teardown"] += 1e3 * (time.perf_counter() - t)
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _peek(addr: int) -> int:
    from .._mem import peek_i64

    return peek_i64(addr)


def run_simulation(model_init: Callable[[Simulation], None], iterations: int,
                   params: SimulationParams | None = None, keep: bool = False):
    """Initialize with ``model_init(sim)``, run ``iterations`` and return the report.

    With ``keep=True`` the live :class:`Simulation` is returned too (the
    caller closes it).
    """
    t0 = time.perf_counter()
    sim = Simulation(params)
    try:
        t = time.perf_counter()
        model_init(sim)
        sim.category_ms["setup_teardown"] += 1e3 * (time.perf_counter() - t)
        sim.peak_rss = max(sim.peak_rss, resident_bytes())
        sim.run(iterations)
    except BaseException:
        sim.close()
        raise
    if keep:
        report = sim.report(1e3 * (time.perf_counter() - t0))
        return report, sim
    sim.close()
    return sim.report(1e3 * (time.perf_counter() - t0))
