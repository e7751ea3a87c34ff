#!/usr/bin/env python3
"""Wall time of the clustering model against the sorting frequency."""

import argparse

from agentsim.bench import BenchConfig, sweep_sorting

p = argparse.ArgumentParser()
p.add_argument("--agents", type=int, default=100_000)
p.add_argument("--iterations", type=int, default=10)
p.add_argument("--threads", type=int, default=8)
p.add_argument("--frequencies", default="0,1,2,5,10")
p.add_argument("--repetitions", type=int, default=2)
p.add_argument("--out", default="sorting_sweep.csv")
a = p.parse_args()

cfg = BenchConfig(model="clustering", agents=a.agents, iterations=a.iterations, threads=[a.threads],
                  repetitions=a.repetitions)
rows = sweep_sorting(cfg, [int(f) for f in a.frequencies.split(",")], out=a.out)
best = {}
for r in rows:
    f = r["sorting_freq"]
    best[f] = min(best.get(f, float("inf")), r["wall_ms_total"])
base = best.get(0)
for f, t in best.items():
    extra = f"  speedup {base / t:.2f}x" if base else ""
    print(f"frequency {f:>3}: {t / 1e3:7.2f} s{extra}")
