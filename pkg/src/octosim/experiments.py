"""Experiment driver: single runs, parameter sweeps, suite comparisons and
multi-die (wafer) runs.  The command line is a thin wrapper over this
module."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import product
from pathlib import Path

from .fabric import Fabric, FabricConfig
from .metrics import RunReport, export, geomean, make_report, speedup, utilization
from .owg import load_graph, validate
from .partition import build_plan
from .schedulers import SUITES, suite_from
from .workloads import (DEFAULT_TARGET_RATE, encode_schedule, generate_benchmark, generate_input, preset,
                        read_trace)

OUTPUT_ENV = "OCTOSIM_OUTPUT_DIR"


class ExperimentError(ValueError):
    """Bad experiment configuration."""


class MemoryBudgetError(RuntimeError):
    """Estimated simulator state exceeds the configured budget."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run.  All fields have defaults; unknown
    keys are rejected by :meth:`from_dict`."""

    benchmark: str = "ER"
    # per-field overrides of the benchmark preset (see BenchmarkSpec)
    benchmark_overrides: dict = field(default_factory=dict)
    # custom workload instead of a preset: OWG JSON and optional schedule trace
    graph_path: str | None = None
    trace_path: str | None = None
    fabric: dict = field(default_factory=dict)
    suite: str = "combined"
    seed: int = 1
    cluster_size: int | None = None
    output_dir: str | None = None
    max_cycles: int | None = None
    debug: bool = False
    reference: bool = False
    event_trace: bool = False
    # sweep axes; an empty list means "not swept"
    cluster_sizes: tuple = ()
    diffusion_periods: tuple = ()
    reconfig_latencies: tuple = ()
    repetitions: int = 1
    workers: int = 1
    # compare / multi-benchmark runs
    benchmarks: tuple = ()
    suites: tuple = ("baseline", "adaptive", "proactive", "combined")
    # wafer mode
    memory_budget_mb: int = 2048

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ExperimentError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("cluster_sizes", "diffusion_periods", "reconfig_latencies", "benchmarks", "suites"):
            if k in kw:
                kw[k] = tuple(kw[k])
        cfg = cls(**kw)
        cfg.check()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def check(self) -> None:
        FabricConfig.from_dict(self.fabric).check()
        suite_from(self.suite)
        for s in self.suites:
            suite_from(s)
        if self.repetitions < 1 or self.workers < 1:
            raise ExperimentError("repetitions and workers must be >= 1")

    def with_overrides(self, assignments) -> ExperimentConfig:
        """Apply ``key=value`` strings; dotted keys reach into the
        ``fabric`` and ``benchmark_overrides`` dicts.  Values are parsed as
        JSON when possible, else taken as strings."""
        d = self.to_dict()
        for a in assignments:
            if "=" not in a:
                raise ExperimentError(f"override {a!r} is not key=value")
            key, raw = a.split("=", 1)
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            parts = key.strip().split(".")
            if len(parts) == 2 and parts[0] in ("fabric", "benchmark_overrides"):
                d[parts[0]] = {**d[parts[0]], parts[1]: val}
            elif len(parts) == 1:
                d[parts[0]] = val
            else:
                raise ExperimentError(f"cannot override {key!r}")
        return ExperimentConfig.from_dict(d)


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise ExperimentError(f"{path}: {e}") from None
    return ExperimentConfig.from_dict(d)


# ----------------------------------------------------------------------

def build_workload(cfg: ExperimentConfig):
    """Returns (graph, schedule, target_rate, workload_hash)."""
    if cfg.graph_path:
        graph = load_graph(cfg.graph_path)
        report = validate(graph)
        if not report.ok:
            raise ExperimentError("invalid OWG: " + "; ".join(report.violations))
        if not cfg.trace_path:
            raise ExperimentError("a custom graph needs trace_path")
        schedule = read_trace(cfg.trace_path)
        rate = float(cfg.benchmark_overrides.get("target_rate", DEFAULT_TARGET_RATE))
    else:
        spec = preset(cfg.benchmark, **cfg.benchmark_overrides)
        graph, _ = generate_benchmark(spec, cfg.seed)
        schedule = read_trace(cfg.trace_path) if cfg.trace_path else generate_input(spec, cfg.seed)
        rate = spec.target_rate
    h = hashlib.blake2b(digest_size=16)
    h.update(graph.to_json().encode())
    h.update(encode_schedule(schedule))
    h.update(str(cfg.seed).encode())
    return graph, schedule, rate, h.hexdigest()


def make_fabric(cfg: ExperimentConfig, workload=None) -> Fabric:
    graph, schedule, rate, _ = workload or build_workload(cfg)
    plan = build_plan(graph, target_rate=rate, cluster_size=cfg.cluster_size)
    fab = Fabric(FabricConfig.from_dict(cfg.fabric), plan, graph, suite_from(cfg.suite), seed=cfg.seed,
                 reference=cfg.reference, debug=cfg.debug, trace=cfg.event_trace)
    fab.attach(schedule)
    return fab


def config_echo(cfg: ExperimentConfig, fab: Fabric) -> dict:
    """Fully resolved parameters of a run (no paths, no presentation
    options), so equivalent configurations echo identically."""
    if cfg.graph_path:
        bench = {"graph_sha": hashlib.blake2b(fab.graph.to_json().encode(), digest_size=16).hexdigest()}
    else:
        bench = preset(cfg.benchmark, **cfg.benchmark_overrides).to_dict()
    return {"benchmark": bench, "fabric": fab.config.to_dict(), "suite": fab.suite.to_dict(),
            "seed": cfg.seed, "cluster_size": fab.plan.cluster_size, "max_cycles": cfg.max_cycles}


def run(cfg: ExperimentConfig, workload=None) -> RunReport:
    """Run one experiment; exports files when ``output_dir`` is set."""
    workload = workload or build_workload(cfg)
    fab = make_fabric(cfg, workload)
    fab.run(cfg.max_cycles)
    report = make_report(fab, workload[3], config_echo(cfg, fab))
    if cfg.output_dir:
        export(report, cfg.output_dir)
        if cfg.event_trace:
            fab.write_trace(Path(cfg.output_dir) / "events.bin")
    return report


# ----------------------------------------------------------------------
# sweeps

SWEEP_AXES = (("cluster_size", "cluster_sizes"), ("diffusion_period", "diffusion_periods"),
              ("reconfig_latency", "reconfig_latencies"))
SWEEP_COLUMNS = ("benchmark", "suite", "cluster_size", "diffusion_period", "reconfig_latency", "rep",
                 "seed", "total_cycles", "utilization", "diffusive_bytes", "reactive_bytes",
                 "reconfig_count", "error")


def sweep_cells(cfg: ExperimentConfig) -> list[dict]:
    axes = [(name, list(getattr(cfg, plural)) or [None]) for name, plural in SWEEP_AXES]
    cells = []
    for vals in product(*(v for _, v in axes), range(cfg.repetitions)):
        cell = {name: v for (name, _), v in zip(axes, vals[:-1])}
        cell["rep"] = vals[-1]
        cells.append(cell)
    return cells


def cell_config(cfg: ExperimentConfig, cell: dict) -> ExperimentConfig:
    fab = dict(cfg.fabric)
    if cell.get("diffusion_period") is not None:
        fab["diffusion_period"] = cell["diffusion_period"]
    if cell.get("reconfig_latency") is not None:
        fab["reconfig_latency"] = cell["reconfig_latency"]
    cs = cell["cluster_size"] if cell.get("cluster_size") is not None else cfg.cluster_size
    return replace(cfg, fabric=fab, cluster_size=cs, seed=cfg.seed + cell["rep"], output_dir=None,
                   cluster_sizes=(), diffusion_periods=(), reconfig_latencies=(), repetitions=1)


def _run_cell(args):
    cfg_dict, cell = args
    cfg = cell_config(ExperimentConfig.from_dict(cfg_dict), cell)
    row = {"benchmark": cfg.benchmark, "suite": cfg.suite, **cell, "seed": cfg.seed}
    try:
        rep = run(cfg)
        row.update(total_cycles=rep.total_cycles, utilization=utilization(rep),
                   diffusive_bytes=rep.load_movement_bytes["diffusive"],
                   reactive_bytes=rep.load_movement_bytes["reactive"],
                   reconfig_count=rep.reconfig_count, error="")
    except Exception as e:  # recorded per cell, the sweep carries on
        row.update(total_cycles=None, utilization=None, diffusive_bytes=None, reactive_bytes=None,
                   reconfig_count=None, error=f"{type(e).__name__}: {e}")
    return row


def sweep(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    """Cartesian product of the configured axes x repetitions.  Rows come
    back sorted by cell key whatever the worker count."""
    cells = sweep_cells(cfg)
    jobs = [(cfg.to_dict(), c) for c in cells]
    workers = cfg.workers if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    if rows and all(r["error"] for r in rows):
        raise ExperimentError("every sweep cell failed; first error: " + rows[0]["error"])
    key = lambda r: tuple((v is None, v if v is not None else 0) for v in
                          (r["cluster_size"], r["diffusion_period"], r["reconfig_latency"], r["rep"]))
    rows.sort(key=key)
    if cfg.output_dir:
        write_table(Path(cfg.output_dir) / "sweep.csv", rows, SWEEP_COLUMNS)
    return rows


def best_cell(rows, axis: str, metric: str = "utilization"):
    """Axis value with the highest mean metric; ties go to the smallest value."""
    acc: dict = {}
    for r in rows:
        if r["error"]:
            continue
        acc.setdefault(r[axis], []).append(r[metric])
    means = {k: sum(v) / len(v) for k, v in acc.items()}
    best = min(means, key=lambda k: (-means[k], k))
    return best, means


def write_table(path, rows, columns) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                    for k in columns})
    path.write_text(buf.getvalue())


# ----------------------------------------------------------------------
# comparisons

def compare(cfg: ExperimentConfig, suites=None, benchmarks=None) -> dict:
    """Run every suite on every benchmark and report speedups over the
    first suite.  Returns {"rows": [...], "geomean": {suite: x}}."""
    suites = list(suites or cfg.suites)
    if len(suites) < 2:
        raise ExperimentError("compare needs at least two suites")
    benchmarks = list(benchmarks or cfg.benchmarks or [cfg.benchmark])
    rows = []
    per_suite: dict[str, list[float]] = {s: [] for s in suites}
    for b in benchmarks:
        bcfg = replace(cfg, benchmark=b, output_dir=None)
        workload = build_workload(bcfg)
        reports = {s: run(replace(bcfg, suite=s), workload) for s in suites}
        base = reports[suites[0]]
        for s in suites:
            sp = speedup(base, reports[s])
            per_suite[s].append(sp)
            rows.append({"benchmark": b, "suite": s, "total_cycles": reports[s].total_cycles,
                         "utilization": utilization(reports[s]), "speedup": sp})
    gm = {s: geomean(v) for s, v in per_suite.items()}
    if cfg.output_dir:
        out = rows + [{"benchmark": "geomean", "suite": s, "speedup": v} for s, v in gm.items()]
        write_table(Path(cfg.output_dir) / "speedups.csv", out,
                    ("benchmark", "suite", "total_cycles", "utilization", "speedup"))
    return {"rows": rows, "geomean": gm}


# ----------------------------------------------------------------------
# wafer mode

def estimate_state_bytes(cfg: ExperimentConfig) -> int:
    """Rough upper bound on simulator memory: per-TBU/CBU bookkeeping plus
    every scheduled packet and its worst-case Expand fan-out."""
    fab = FabricConfig.from_dict(cfg.fabric)
    R, C = fab.total_tbu_grid
    spec = preset(cfg.benchmark, **cfg.benchmark_overrides) if not cfg.graph_path else None
    n_pkts = spec.stream_count * spec.packets_per_stream if spec else 10_000
    fan = spec.fanout_cap if spec and spec.expand_count else 1
    return R * C * 4096 + n_pkts * 400 * fan


def wafer_config(cfg: ExperimentConfig, dies=(4, 4)) -> ExperimentConfig:
    """The same experiment on a ``dies`` grid with the stream count scaled
    by the number of dies so each die sees a similar load."""
    n = dies[0] * dies[1]
    fab = {**cfg.fabric, "dies": list(dies)}
    fab.setdefault("inter_die_bandwidth", FabricConfig.from_dict(cfg.fabric).data_link_bandwidth)
    over = dict(cfg.benchmark_overrides)
    if not cfg.graph_path:
        base = preset(cfg.benchmark, **over)
        over["stream_count"] = base.stream_count * n
    return replace(cfg, fabric=fab, benchmark_overrides=over)


def wafer_mode(cfg: ExperimentConfig, dies=(4, 4)) -> RunReport:
    wcfg = wafer_config(cfg, dies)
    need = estimate_state_bytes(wcfg)
    if need > wcfg.memory_budget_mb * (1 << 20):
        raise MemoryBudgetError(f"estimated state {need / (1 << 20):.0f} MB exceeds the "
                                f"{wcfg.memory_budget_mb} MB budget; reduce packets_per_stream")
    return run(wcfg)


def default_output_dir() -> str | None:
    return os.environ.get(OUTPUT_ENV)
