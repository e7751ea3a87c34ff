#!/usr/bin/env python3
"""Static-front model with and without static-agent detection."""

import argparse

import numpy as np

from agentsim.core.params import SimulationParams
from agentsim.core.scheduler import run_simulation
from agentsim.models import model_static_front

p = argparse.ArgumentParser()
p.add_argument("--agents", type=int, default=4000)
p.add_argument("--iterations", type=int, default=40)
p.add_argument("--threads", type=int, default=1)
a = p.parse_args()

state = {}
for detect in (False, True):
    params = SimulationParams(detect_static_agents=detect, thread_count=a.threads, domain_count=1)
    report, sim = run_simulation(model_static_front(a.agents), a.iterations, params, keep=True)
    snap = sim.snapshot()
    sim.close()
    o = np.argsort(snap["uid"])
    state[detect] = (report, snap["position"][o])
    c = report.counters
    print(f"detection {'on ' if detect else 'off'}: {report.wall_ms_total / 1e3:6.2f} s  "
          f"force evaluations {c['force_evals']:>10}  skipped agents {c['static_skips']:>8}")
(r0, p0), (r1, p1) = state[False], state[True]
dev = float(np.abs(p0 - p1).max()) if p0.shape == p1.shape else float("inf")
print(f"max position deviation {dev:.1e}, evaluations ratio "
      f"{r1.counters['force_evals'] / r0.counters['force_evals']:.1%}")
