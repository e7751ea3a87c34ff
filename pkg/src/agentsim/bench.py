"""Benchmark configuration, sweep execution and CSV/JSON report emission."""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core.params import ALLOCATOR_KINDS, ENVIRONMENT_KINDS, SimulationParams
from .core.scheduler import CATEGORIES, SimulationReport, run_simulation
from .execution import ENV_THREADS
from .models import MODELS, make_model

CSV_COLUMNS = [
    "model", "agents", "iterations", "threads", "domain_count", "env", "allocator", "sorting_freq",
    "static_detect", "wall_ms_total", *[f"wall_ms_{c}" for c in CATEGORIES], "peak_rss_bytes",
    "force_evals", "repetition",
]  # fmt: skip


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is the 1-based line in the config file, if any."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path, self.line = path, line
        where = f"{path}:{line}: " if path and line else f"{path}: " if path else ""
        super().__init__(where + message)


@dataclass
class BenchConfig:
    model: str = "clustering"
    agents: int = 1000
    iterations: int = 10
    threads: list[int | None] = field(default_factory=lambda: [None])
    domains: int | None = None
    sorting_frequency: list[int] = field(default_factory=lambda: [0])
    environment: list[str] = field(default_factory=lambda: ["uniform_grid"])
    allocator: list[str] = field(default_factory=lambda: ["pool"])
    static_detection: list[bool] = field(default_factory=lambda: [False])
    repetitions: int = 1
    seed: int = 0
    out: str | None = None
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {sorted(MODELS)}")
        if self.agents < 0 or self.iterations < 0:
            raise ConfigError("agents and iterations must be >= 0")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        for name in ("threads", "sorting_frequency", "environment", "allocator", "static_detection"):
            axis = getattr(self, name)
            if not isinstance(axis, list) or not axis:
                raise ConfigError(f"sweep axis {name} must be a non-empty finite list")
        for t in self.threads:
            if t is not None and t < 1:
                raise ConfigError("threads must be >= 1")
        for e in self.environment:
            if e not in ENVIRONMENT_KINDS:
                raise ConfigError(f"unknown environment {e!r}; choose from {list(ENVIRONMENT_KINDS)}")
        for a in self.allocator:
            if a not in ALLOCATOR_KINDS:
                raise ConfigError(f"unknown allocator {a!r}; choose from {list(ALLOCATOR_KINDS)}")
        for f in self.sorting_frequency:
            if f < 0:
                raise ConfigError("sorting frequency must be >= 0")
        unknown = set(self.overrides) - set(SimulationParams.field_names())
        if unknown:
            raise ConfigError(f"unknown simulation parameter(s) {sorted(unknown)}")

    def cells(self) -> list[dict]:
        """Cross product of the sweep axes."""
        out = []
        for t, f, e, a, s in itertools.product(self.threads, self.sorting_frequency, self.environment,
                                                self.allocator, self.static_detection):
            out.append({"threads": t, "sorting_frequency": f, "environment": e, "allocator": a,
                        "static_detection": s})
        return out

    def params_for(self, cell: dict) -> SimulationParams:
        kw = dict(self.overrides)
        kw.update(thread_count=cell["threads"], domain_count=self.domains, sorting_frequency=cell["sorting_frequency"],
                  environment_kind=cell["environment"], allocator_kind=cell["allocator"],
                  detect_static_agents=cell["static_detection"], seed=self.seed)
        try:
            return SimulationParams(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def single(self) -> BenchConfig:
        """The first cell of the sweep as a one-cell configuration."""
        c = self.cells()[0]
        return replace(self, threads=[c["threads"]], sorting_frequency=[c["sorting_frequency"]],
                       environment=[c["environment"]], allocator=[c["allocator"]],
                       static_detection=[c["static_detection"]], repetitions=1)


# config files

_LIST_KEYS = {"threads", "sorting_frequency", "environment", "allocator", "static_detection"}
_KEY_ALIASES = {
    "env": "environment", "sorting_freq": "sorting_frequency", "static_detect": "static_detection",
    "reps": "repetitions",
}  # fmt: skip


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_threads(text: str) -> int | None:
    return None if text.strip().lower() in ("auto", "") else int(text)


def _choice(options):
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"{t!r} is not one of {sorted(options)}")
        return t

    return parse


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


_PARSERS = {
    "model": _choice(MODELS), "agents": _non_negative, "iterations": _non_negative, "domains": _parse_threads,
    "repetitions": int, "seed": int, "out": str.strip, "threads": _parse_threads,
    "sorting_frequency": _non_negative, "environment": _choice(ENVIRONMENT_KINDS),
    "allocator": _choice(ALLOCATOR_KINDS), "static_detection": parse_bool,
}  # fmt: skip


def _override_parser(name: str):
    f = next(f for f in fields(SimulationParams) if f.name == name)
    default = f.default
    if isinstance(default, bool):
        return parse_bool
    if isinstance(default, int) or name in ("thread_count", "domain_count"):
        return _parse_threads if default is None else int
    if isinstance(default, float):
        return float
    return lambda s: s.strip()


def parse_value(key: str, raw: str):
    key = _KEY_ALIASES.get(key, key)
    if key in _PARSERS:
        p = _PARSERS[key]
        if key in _LIST_KEYS:
            items = [s for s in raw.split(",") if s.strip()]
            if not items:
                raise ValueError("empty list")
            return key, [p(s) for s in items]
        return key, p(raw)
    if key in SimulationParams.field_names():
        return key, _override_parser(key)(raw)
    raise KeyError(key)


def read_config_file(path: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Errors name the line."""
    values: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc.strerror}", path) from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", path, lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            k, v = parse_value(key, raw)
        except KeyError:
            raise ConfigError(f"unknown key {key!r}", path, lineno) from None
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key!r}: {exc}", path, lineno) from None
        values[k] = v
    return values


def build_config(file_values: dict | None = None, flag_values: dict | None = None, environ=None) -> BenchConfig:
    """Merge with precedence flags > thread environment variable > config file > defaults."""
    merged: dict = {}
    merged.update(file_values or {})
    environ = os.environ if environ is None else environ
    if environ.get(ENV_THREADS):
        try:
            merged["threads"] = [int(environ[ENV_THREADS])]
        except ValueError:
            raise ConfigError(f"{ENV_THREADS} must be an integer") from None
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    names = {f.name for f in fields(BenchConfig)}
    overrides = {k: merged.pop(k) for k in list(merged) if k not in names}
    overrides.update(merged.pop("overrides", {}))
    return BenchConfig(**merged, overrides=overrides)


# execution

def report_row(cfg: BenchConfig, cell: dict, report: SimulationReport, repetition: int) -> dict:
    row = {
        "model": cfg.model, "agents": cfg.agents, "iterations": report.iterations, "threads": report.threads,
        "domain_count": report.domains, "env": cell["environment"], "allocator": cell["allocator"],
        "sorting_freq": cell["sorting_frequency"], "static_detect": int(cell["static_detection"]),
        "wall_ms_total": round(report.wall_ms_total, 3),
    }  # fmt: skip
    for c in CATEGORIES:
        row[f"wall_ms_{c}"] = round(report.category_ms[c], 3)
    row["peak_rss_bytes"] = report.peak_rss_bytes
    row["force_evals"] = report.counters["force_evals"]
    row["repetition"] = repetition
    return row


def run_cell(cfg: BenchConfig, cell: dict) -> SimulationReport:
    model = make_model(cfg.model, cfg.agents, seed=cfg.seed)
    return run_simulation(model, cfg.iterations, cfg.params_for(cell))


def run_cell_isolated(cfg: BenchConfig, cell: dict) -> dict:
    """Run one cell in a fresh interpreter so peak memory is not shared between cells."""
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "report.json")
        cmd = [sys.executable, "-m", "agentsim", "run", "--model", cfg.model, "--agents", str(cfg.agents),
               "--iterations", str(cfg.iterations), "--env", cell["environment"], "--allocator",
               cell["allocator"], "--sorting-frequency", str(cell["sorting_frequency"]), "--static-detection",
               str(int(cell["static_detection"])), "--seed", str(cfg.seed), "--out", out]
        if cell["threads"] is not None:
            cmd += ["--threads", str(cell["threads"])]
        if cfg.domains is not None:
            cmd += ["--domains", str(cfg.domains)]
        for k, v in cfg.overrides.items():
            cmd += ["--set", f"{k}={v}"]
        env = {k: v for k, v in os.environ.items() if k != ENV_THREADS}
        subprocess.run(cmd, check=True, env=env, stdout=subprocess.DEVNULL)
        with open(out) as fh:
            return json.load(fh)


def _report_from_dict(d: dict) -> SimulationReport:
    names = {f.name for f in fields(SimulationReport)}
    return SimulationReport(**{k: v for k, v in d.items() if k in names})


def cmd_run(cfg: BenchConfig, out: str | None = None) -> SimulationReport:
    """Execute the first cell of ``cfg`` once and write its JSON report."""
    one = cfg.single()
    if one.agents >= 2:
        warm_up(one, one.cells()[0])
    report = run_cell(one, one.cells()[0])
    path = out or cfg.out
    if path:
        d = report.to_dict()
        d.update(model=cfg.model, agents=cfg.agents)
        write_json(path, d)
    return report


def warm_up(cfg: BenchConfig, cell: dict) -> None:
    """Load compiled kernels with a tiny untimed run so the first measured cell is not penalized."""
    small = replace(cfg, agents=min(cfg.agents, 64 if cfg.model != "static_front" else 8), iterations=2)
    run_cell(small, cell)


def cmd_bench(cfg: BenchConfig, out: str | None = None, isolated: bool = False) -> list[dict]:
    """Run the sweep cross product times the repetitions; append one CSV row per run."""
    rows = []
    path = out or cfg.out
    if not isolated and cfg.agents >= 2:
        warm_up(cfg, cfg.cells()[0])
    for cell in cfg.cells():
        for rep in range(cfg.repetitions):
            if isolated:
                report = _report_from_dict(run_cell_isolated(cfg, cell))
            else:
                report = run_cell(cfg, cell)
            row = report_row(cfg, cell, report, rep)
            rows.append(row)
            if path:
                append_csv(path, [row])
    return rows


def append_csv(path: str, rows: list[dict]) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new:
            w.writeheader()
        w.writerows(rows)


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: str, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(type(o).__name__)


# sweeps

DEFAULT_SORTING_FREQUENCIES = [0, 1, 2, 5, 10]
DEFAULT_COMPLEXITY_AGENTS = [1000, 10_000, 100_000, 1_000_000]


def sweep_sorting(cfg: BenchConfig, frequencies=None, out=None) -> list[dict]:
    return cmd_bench(replace(cfg, sorting_frequency=list(frequencies or DEFAULT_SORTING_FREQUENCIES)), out)


def sweep_env(cfg: BenchConfig, kinds=None, out=None) -> list[dict]:
    return cmd_bench(replace(cfg, environment=list(kinds or ["uniform_grid", "kdtree"])), out)


def sweep_alloc(cfg: BenchConfig, kinds=None, out=None) -> list[dict]:
    return cmd_bench(replace(cfg, allocator=list(kinds or ALLOCATOR_KINDS)), out)


def complexity(cfg: BenchConfig, agents=None, out=None, isolated: bool = True) -> tuple[list[dict], dict]:
    """Agent-count sweep; returns the rows and the log-log slopes of time and memory above 10^4 agents."""
    rows, rss = [], []
    for n in agents or DEFAULT_COMPLEXITY_AGENTS:
        c = replace(cfg, agents=n)
        cell = c.cells()[0]
        for rep in range(c.repetitions):
            if isolated:
                d = run_cell_isolated(c, cell)
                report = _report_from_dict(d)
            else:
                report = run_cell(c, cell)
            row = report_row(c, cell, report, rep)
            rows.append(row)
            rss.append(report.rss_delta_bytes)
            if out or cfg.out:
                append_csv(out or cfg.out, [row])
    slopes = complexity_slopes(rows, rss)
    return rows, slopes


def complexity_slopes(rows: list[dict], rss_delta: list[int], above: int = 10_000) -> dict:
    n = np.array([float(r["agents"]) for r in rows])
    t = np.array([float(r["wall_ms_total"]) - float(r["wall_ms_setup_teardown"]) for r in rows])
    m = np.array([max(float(x), 1.0) for x in rss_delta])
    keep = n >= above
    return {"time_slope": loglog_slope(n[keep], t[keep]), "memory_slope": loglog_slope(n[keep], m[keep])}


def loglog_slope(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(np.unique(x)) < 2:
        return math.nan
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])
