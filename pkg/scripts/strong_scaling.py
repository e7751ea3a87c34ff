#!/usr/bin/env python3
"""Strong scaling of the clustering model, grid against kd-tree."""

import argparse

from agentsim.bench import BenchConfig, cmd_bench

p = argparse.ArgumentParser()
p.add_argument("--agents", type=int, default=100_000)
p.add_argument("--iterations", type=int, default=10)
p.add_argument("--threads", default="1,2,4,8")
p.add_argument("--sorting-frequency", type=int, default=5)
p.add_argument("--out", default="strong_scaling.csv")
a = p.parse_args()

cfg = BenchConfig(model="clustering", agents=a.agents, iterations=a.iterations,
                  threads=[int(t) for t in a.threads.split(",")], sorting_frequency=[a.sorting_frequency],
                  environment=["uniform_grid", "kdtree"], static_detection=[True])
rows = cmd_bench(cfg, out=a.out)
base = {r["env"]: r["wall_ms_total"] for r in rows if r["threads"] == 1}
for r in rows:
    s = base.get(r["env"], 0) / r["wall_ms_total"] if base.get(r["env"]) else float("nan")
    print(f"{r['env']:>12} threads {r['threads']:>2}: {r['wall_ms_total'] / 1e3:7.2f} s  speedup {s:.2f}x")
