"""Command-line front end (``agentsim`` / ``python -m agentsim``)."""

from __future__ import annotations

import argparse
import json
import sys

from . import bench
from .bench import ConfigError
from .core.scheduler import SimulationError

SUBCOMMANDS = ("run", "bench", "sweep-sorting", "sweep-env", "sweep-alloc", "complexity")


def _flag_list(key: str):
    def parse(text: str):
        try:
            return bench.parse_value(key, text)[1]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agentsim", description="Parallel agent-based simulation benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key=value file; flags override it")
        s.add_argument("--model", choices=sorted(bench.MODELS))
        if name == "complexity":
            s.add_argument("--agents", type=lambda t: [int(x) for x in t.split(",")],
                           help="comma-separated agent counts")
        else:
            s.add_argument("--agents", type=int)
        s.add_argument("--iterations", type=int)
        s.add_argument("--threads", type=_flag_list("threads"), help="count or comma-separated list")
        s.add_argument("--domains", type=int)
        s.add_argument("--env", dest="environment", type=_flag_list("environment"))
        s.add_argument("--allocator", type=_flag_list("allocator"))
        s.add_argument("--sorting-frequency", dest="sorting_frequency", type=_flag_list("sorting_frequency"))
        s.add_argument("--static-detection", dest="static_detection", type=_flag_list("static_detection"))
        s.add_argument("--seed", type=int)
        s.add_argument("--repetitions", type=int)
        s.add_argument("--out")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="simulation parameter override")
        if name in ("bench", "complexity"):
            s.add_argument("--isolated", action=argparse.BooleanOptionalAction, default=name == "complexity",
                           help="run every cell in a fresh interpreter")
    return p


def _config(args) -> bench.BenchConfig:
    file_values = bench.read_config_file(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in ("model", "iterations", "threads", "domains", "environment",
                                           "allocator", "sorting_frequency", "static_detection", "seed",
                                           "repetitions", "out")}
    if args.command != "complexity":
        flags["agents"] = args.agents
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        try:
            key, val = bench.parse_value(k, v)
        except KeyError:
            raise ConfigError(f"unknown key {k!r} in --set") from None
        except ValueError as exc:
            raise ConfigError(f"invalid value for {k!r} in --set: {exc}") from None
        flags[key] = val
    return bench.build_config(file_values, flags)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        cmd = args.command
        if cmd == "run":
            report = bench.cmd_run(cfg)
            if not cfg.out:
                json.dump(report.to_dict(), sys.stdout, indent=2)
                print()
        elif cmd == "bench":
            _emit(bench.cmd_bench(cfg, isolated=args.isolated), cfg)
        elif cmd == "sweep-sorting":
            freqs = cfg.sorting_frequency if args.sorting_frequency else None
            _emit(bench.sweep_sorting(cfg, freqs), cfg)
        elif cmd == "sweep-env":
            _emit(bench.sweep_env(cfg, cfg.environment if args.environment else None), cfg)
        elif cmd == "sweep-alloc":
            _emit(bench.sweep_alloc(cfg, cfg.allocator if args.allocator else None), cfg)
        elif cmd == "complexity":
            rows, slopes = bench.complexity(cfg, args.agents, isolated=args.isolated)
            _emit(rows, cfg)
            print(json.dumps(slopes), file=sys.stderr)
    except ConfigError as exc:
        print(f"agentsim: config error: {exc}", file=sys.stderr)
        return 2
    except SimulationError as exc:
        print(f"agentsim: {exc}", file=sys.stderr)
        return 1
    return 0


def _emit(rows: list[dict], cfg: bench.BenchConfig) -> None:
    if cfg.out:
        return
    import csv

    w = csv.DictWriter(sys.stdout, fieldnames=bench.CSV_COLUMNS)
    w.writeheader()
    w.writerows(rows)


if __name__ == "__main__":
    sys.exit(main())
