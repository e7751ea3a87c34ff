import json

import numpy as np
import pytest

from agentsim.core.agent import Agent
from agentsim.core.behavior import Behavior, GrowDivide
from agentsim.core.params import SimulationParams
from agentsim.core.scheduler import (
    AGENT_OP,
    CATEGORIES,
    STANDALONE_MID,
    STANDALONE_POST,
    STANDALONE_PRE,
    Operation,
    Simulation,
    SimulationError,
    run_simulation,
)
from agentsim.models import model_clustering, model_proliferation


def final_state(model, iterations, **kw):
    kw.setdefault("domain_count", 1)
    report, sim = run_simulation(model, iterations, SimulationParams(**kw), keep=True)
    snap = sim.snapshot()
    sim.close()
    o = np.argsort(snap["uid"])
    return report, snap["uid"][o], snap["position"][o], snap["diameter"][o]


def test_params_validation():
    with pytest.raises(ValueError):
        SimulationParams(sorting_frequency=-1)
    with pytest.raises(ValueError):
        SimulationParams(environment_kind="octree")
    with pytest.raises(ValueError):
        SimulationParams(box_length_policy="big")
    with pytest.raises(ValueError):
        Operation("x", "sometimes")
    with pytest.raises(ValueError):
        Operation("x", STANDALONE_PRE, frequency=0)


def test_hand_division_example():
    report, uids, pos, diam = final_state(model_proliferation(1, growth_rate=10), 3)
    assert report.final_agents == 8
    assert uids.tolist() == list(range(8))
    assert np.all(diam > 0)


def test_phase_order_and_frequency():
    log = []
    with Simulation(SimulationParams(thread_count=2, domain_count=1)) as sim:
        model_proliferation(8)(sim)
        sim.add_operation(Operation("pre", STANDALONE_PRE, 1, lambda: log.append(("pre", sim.iteration))))
        sim.add_operation(Operation("mid", STANDALONE_MID, 2, lambda: log.append(("mid", sim.iteration))))
        sim.add_operation(Operation("post", STANDALONE_POST, 3, lambda: log.append(("post", sim.iteration))))
        sim.run(6)
        assert sim.operation_runs["update_environment"] == 6
        assert sim.operation_runs["mid"] == 3 and sim.operation_runs["post"] == 2
    assert log[:4] == [("pre", 0), ("mid", 0), ("post", 0), ("pre", 1)]
    assert [i for k, i in log if k == "post"] == [0, 3]


def test_user_pre_op_runs_before_propagation():
    with Simulation(SimulationParams(detect_static_agents=True, thread_count=1)) as sim:
        sim.add_operation(Operation("mine", STANDALONE_PRE, 1, lambda: None))
        names = [o.name for o in sim.operations if o.kind == STANDALONE_PRE]
        assert names[-1] == "propagate_staticness" and "mine" in names
        with pytest.raises(ValueError):
            sim.add_operation(Operation("mine", STANDALONE_PRE, 1, lambda: None))


def test_removing_builtin_ops():
    with Simulation(SimulationParams(thread_count=1)) as sim:
        model_proliferation(27, growth_rate=10)(sim)
        sim.remove_operation("behaviors")
        sim.run(3)
        assert sim.rm.size == 27


@pytest.mark.parametrize("model", [model_clustering(3000, seed=4), model_proliferation(500, growth_rate=1.5)])
def test_results_independent_of_thread_count(model):
    ref = final_state(model, 6, thread_count=1)
    for threads, domains in ((3, 1), (4, 2)):
        got = final_state(model, 6, thread_count=threads, domain_count=domains)
        # same agents; neighbor summation order may differ in the last bits
        assert np.array_equal(ref[1], got[1])
        assert np.allclose(ref[2], got[2], rtol=0, atol=1e-9)
        assert np.allclose(ref[3], got[3], rtol=0, atol=1e-9)


def test_sorting_and_environment_do_not_change_results():
    model = model_clustering(3000, seed=2)
    ref = final_state(model, 6, thread_count=2)
    for kw in ({"sorting_frequency": 1}, {"environment_kind": "kdtree"}, {"allocator_kind": "system"},
               {"environment_kind": "brute_force"}):
        got = final_state(model, 6, thread_count=2, **kw)
        assert np.array_equal(ref[1], got[1])
        assert np.allclose(ref[2], got[2], atol=1e-9)


class Splitter(Behavior):
    """Python twin of a one-shot division, plus removal of odd uids."""

    def run(self, agent, ctx):
        if ctx.iteration == 0:
            ctx.new_agent(agent, Agent(agent.position + 100.0, agent.diameter))
        elif ctx.iteration == 1 and agent.uid % 2:
            ctx.remove_agent(agent)


def test_python_behavior_add_and_remove():
    def build(sim):
        sim.rm.push_back_many(np.arange(30.0).reshape(10, 3) * 20, np.full(10, 5.0), [Splitter()])

    for threads in (1, 4):
        report, uids, pos, _ = final_state(build, 2, thread_count=threads)
        # daughters carry no behavior, so only the first ten can be removed
        assert report.final_agents == 15
        assert uids.tolist() == [0, 2, 4, 6, 8] + list(range(10, 20))
        assert np.allclose(pos[5:], np.arange(30.0).reshape(10, 3) * 20 + 100)


def test_user_agent_op_and_python_path_match_compiled_path():
    model = model_proliferation(200, growth_rate=2.0)
    ref = final_state(model, 5, thread_count=2)
    seen = []

    def build(sim):
        model(sim)
        sim.add_operation(Operation("touch", AGENT_OP, 1, lambda rec, ctx: seen.append(rec.uid)))

    got = final_state(build, 5, thread_count=2)
    assert np.array_equal(ref[1], got[1])
    assert np.allclose(ref[2], got[2], rtol=0, atol=1e-9)
    assert len(seen) == sum(_sizes(model, 5))


def test_errors_carry_iteration_and_operation():
    class Boom(Behavior):
        def run(self, agent, ctx):
            if ctx.iteration == 2:
                raise ZeroDivisionError("x")

    def build(sim):
        sim.rm.push_back(Agent((0, 0, 0), 5, [Boom()]))

    with pytest.raises(SimulationError) as ei:
        run_simulation(build, 5, SimulationParams(thread_count=2))
    assert ei.value.iteration == 2 and ei.value.operation == "agent_loop"
    assert isinstance(ei.value.cause, ZeroDivisionError)


def test_structural_change_inside_loop_rejected():
    class Bad(Behavior):
        def run(self, agent, ctx):
            ctx.sim.rm.push_back(Agent((1, 1, 1)))

    def build(sim):
        sim.rm.push_back(Agent((0, 0, 0), 5, [Bad()]))

    with pytest.raises(SimulationError, match="stage"):
        run_simulation(build, 1, SimulationParams(thread_count=1))


def test_report_shape():
    report = run_simulation(model_clustering(500), 3, SimulationParams(thread_count=2, sorting_frequency=2))
    d = report.to_dict()
    json.dumps(d)
    assert set(report.category_ms) == set(CATEGORIES)
    assert report.iterations == 3 and len(report.iteration_ms) == 3
    assert report.operation_runs["sort_and_balance"] == 2
    assert report.wall_ms_total >= sum(report.iteration_ms) * 0.99
    assert report.counters["force_evals"] > 0
    assert report.peak_rss_bytes >= report.rss_baseline_bytes


def test_zero_iterations_and_empty_simulation():
    report = run_simulation(lambda sim: None, 3, SimulationParams(thread_count=2))
    assert report.final_agents == 0 and report.iterations == 3
    with pytest.raises(ValueError):
        Simulation(SimulationParams(thread_count=1)).run(-1)


def _sizes(model, iterations):
    """Population at the start of each iteration."""
    out = []
    with Simulation(SimulationParams(thread_count=1)) as sim:
        model(sim)
        for _ in range(iterations):
            out.append(sim.rm.size)
            sim.step()
    return out
