#!/usr/bin/env python3
"""Pool allocator against the system allocator on the proliferation model."""

import argparse

from agentsim.bench import BenchConfig, sweep_alloc

p = argparse.ArgumentParser()
p.add_argument("--agents", type=int, default=100_000)
p.add_argument("--iterations", type=int, default=10)
p.add_argument("--threads", type=int, default=None)
p.add_argument("--repetitions", type=int, default=3)
p.add_argument("--out", default="allocator_ab.csv")
a = p.parse_args()

cfg = BenchConfig(model="proliferation", agents=a.agents, iterations=a.iterations, threads=[a.threads],
                  repetitions=a.repetitions)
rows = sweep_alloc(cfg, out=a.out)
best = {}
for r in rows:
    best[r["allocator"]] = min(best.get(r["allocator"], float("inf")), r["wall_ms_total"])
for k, t in best.items():
    print(f"{k:>6}: {t / 1e3:.2f} s")
print(f"pool / system = {best['pool'] / best['system']:.2f}")
