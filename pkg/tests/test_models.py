import numpy as np
import pytest

from agentsim.core.params import SimulationParams
from agentsim.core.scheduler import Simulation, run_simulation
from agentsim.models import make_model, model_clustering, model_proliferation, model_static_front, slab_shape


@pytest.mark.parametrize("n,side", [(1, 1), (8, 2), (9, 3), (27, 3), (1000, 10), (1001, 11)])
def test_proliferation_lattice_size(n, side):
    m = model_proliferation(n)
    assert m.agents == side**3
    with Simulation(SimulationParams(thread_count=1)) as sim:
        m(sim)
        assert sim.rm.size == side**3


def test_proliferation_grows_population():
    report = run_simulation(model_proliferation(64, growth_rate=1.0), 8, SimulationParams(thread_count=2))
    assert report.final_agents > 64


def test_clustering_density_and_types():
    with Simulation(SimulationParams(thread_count=1)) as sim:
        model_clustering(2000, seed=3)(sim)
        snap = sim.snapshot()
    side = (2000 / 7.2e-4) ** (1 / 3)
    assert snap["position"].min() >= 0 and snap["position"].max() <= side
    assert set(np.unique(snap["agent_type"]).tolist()) == {0, 1}


def test_clustering_seed_controls_layout():
    def pos(seed):
        with Simulation(SimulationParams(thread_count=1)) as sim:
            model_clustering(100, seed=seed)(sim)
            return sim.snapshot()["position"]

    assert np.array_equal(pos(1), pos(1))
    assert not np.array_equal(pos(1), pos(2))


def test_clustering_pulls_same_type_together():
    params = SimulationParams(thread_count=2)
    report, sim = run_simulation(model_clustering(3000, step=1.0, seed=0), 0, params, keep=True)
    before = sim.snapshot()["position"].copy()
    sim.run(20)
    after = sim.snapshot()["position"]
    sim.close()
    assert np.linalg.norm(after - before, axis=1).max() > 0


def test_static_front_layout():
    wx, wy, wz = slab_shape(1000)
    assert wx * wy * wz >= 1000
    with Simulation(SimulationParams(thread_count=1)) as sim:
        model_static_front(1000)(sim)
        snap = sim.snapshot()
    assert len(snap["uid"]) == 1003
    slab = snap["position"][snap["agent_type"] == 0]
    d = np.linalg.norm(slab[:, None, :] - slab[None, :200, :], axis=2)
    # touching but never overlapping
    assert d[d > 0].min() == pytest.approx(10.0)


def test_static_front_mostly_static():
    report = run_simulation(model_static_front(2000), 20, SimulationParams(detect_static_agents=True, thread_count=1))
    assert report.counters["static_skips"] > report.counters["mechanics_runs"]


def test_make_model_errors():
    with pytest.raises(ValueError, match="unknown model"):
        make_model("flocking", 10)
    with pytest.raises(ValueError):
        model_clustering(1)
    assert make_model("clustering", 50, seed=4).agents == 50
