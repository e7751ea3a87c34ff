#!/usr/bin/env python3
"""Time and memory growth of the clustering model with the agent count."""

import argparse
import json

from agentsim.bench import BenchConfig, complexity

p = argparse.ArgumentParser()
p.add_argument("--agents", default="1000,10000,100000,1000000")
p.add_argument("--iterations", type=int, default=10)
p.add_argument("--threads", type=int, default=None)
p.add_argument("--out", default="complexity.csv")
a = p.parse_args()

cfg = BenchConfig(model="clustering", iterations=a.iterations, threads=[a.threads])
rows, slopes = complexity(cfg, [int(n) for n in a.agents.split(",")], out=a.out, isolated=True)
for r in rows:
    print(f"{r['agents']:>9} agents: {r['wall_ms_total'] / 1e3:8.2f} s  peak rss {r['peak_rss_bytes'] / 2**20:8.1f} MiB")
print(json.dumps(slopes))
