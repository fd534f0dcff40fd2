"""Command-line driver.

Exit codes: 0 success, 1 unexpected error, 2 usage or configuration error,
3 infeasible benchmark or plan, 4 cluster size does not tile the grid,
5 livelock or deadlock, 6 invariant violation, 7 memory budget exceeded,
8 input file error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .experiments import (
    ExperimentConfig, ExperimentError, MemoryBudgetError, best_cell, compare, default_output_dir,
    load_config, run, sweep,
)
from .fabric import InvariantError, LivelockError, TilingError
from .metrics import utilization
from .owg import ConfigError, load_graph, save_graph, validate
from .partition import PlanError
from .workloads import PRESETS, SpecError, TraceFormatError, generate_benchmark, generate_input, preset, write_trace

EXIT_CODES = [
    (ExperimentError, 2), (ConfigError, 2), (SpecError, 3), (PlanError, 3), (TilingError, 4),
    (LivelockError, 5), (InvariantError, 6), (MemoryBudgetError, 7), (TraceFormatError, 8),
    (OSError, 8),
]


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    sets = list(args.set or [])
    for name in ("benchmark", "suite", "seed", "cluster_size", "max_cycles"):
        val = getattr(args, name, None)
        if val is not None:
            sets.append(f"{name}={json.dumps(val) if not isinstance(val, str) else val}")
    cfg = cfg.with_overrides(sets)
    out = args.output or cfg.output_dir or default_output_dir()
    return replace(cfg, output_dir=out)


def cmd_run(args):
    cfg = _config(args)
    rep = run(cfg)
    print(f"{cfg.benchmark} {cfg.suite}: {rep.total_cycles} cycles, utilization "
          f"{utilization(rep):.4f}, {rep.packets_completed}/{rep.packets_injected} packets")
    if cfg.output_dir:
        print(f"wrote {cfg.output_dir}/summary.json")


def cmd_sweep(args):
    cfg = _config(args)
    if args.cluster_sizes:
        cfg = replace(cfg, cluster_sizes=tuple(args.cluster_sizes))
    if args.periods:
        cfg = replace(cfg, diffusion_periods=tuple(args.periods))
    if args.reconfig_latencies:
        cfg = replace(cfg, reconfig_latencies=tuple(args.reconfig_latencies))
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    rows = sweep(cfg)
    for r in rows:
        u = "-" if r["utilization"] is None else f"{r['utilization']:.4f}"
        print(f"cluster={r['cluster_size']} period={r['diffusion_period']} "
              f"reconfig={r['reconfig_latency']} rep={r['rep']} cycles={r['total_cycles']} util={u} {r['error']}")
    for axis in ("cluster_size", "diffusion_period", "reconfig_latency"):
        if len({r[axis] for r in rows}) > 1:
            best, _ = best_cell(rows, axis)
            print(f"best {axis}: {best}")


def cmd_compare(args):
    cfg = _config(args)
    suites = args.suites or list(cfg.suites)
    benches = args.benchmarks or list(cfg.benchmarks) or [cfg.benchmark]
    res = compare(cfg, suites, benches)
    for r in res["rows"]:
        print(f"{r['benchmark']:6s} {r['suite']:10s} {r['total_cycles']:10d} {r['speedup']:.3f}x")
    for s, v in res["geomean"].items():
        print(f"geomean {s:10s} {v:.3f}x")


def cmd_wafer(args):
    from .experiments import wafer_mode
    cfg = _config(args)
    dies = tuple(args.dies)
    rep = wafer_mode(cfg, dies)
    print(f"wafer {dies[0]}x{dies[1]} {cfg.benchmark}: {rep.total_cycles} cycles, "
          f"utilization {utilization(rep):.4f}")


def cmd_validate(args):
    graph = load_graph(args.graph)
    report = validate(graph)
    if report.ok:
        print(f"{args.graph}: ok ({len(graph.nodes)} nodes, {len(graph.edges)} edges)")
        return 0
    for v in report.violations:
        print(f"{args.graph}: {v}")
    return 3


def cmd_gen(args):
    spec = preset(args.benchmark)
    out = Path(args.output or default_output_dir() or ".")
    out.mkdir(parents=True, exist_ok=True)
    graph, _ = generate_benchmark(spec, args.seed)
    save_graph(graph, out / f"{spec.name}.owg.json")
    write_trace(out / f"{spec.name}.trace", generate_input(spec, args.seed))
    (out / f"{spec.name}.spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"wrote {spec.name}.owg.json, {spec.name}.trace, {spec.name}.spec.json to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octosim", description=__doc__.split("\n")[0],
                                epilog=f"Default output directory comes from ${'OCTOSIM_OUTPUT_DIR'}.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config file (JSON)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field; fabric.X and benchmark_overrides.X reach nested keys")
        sp.add_argument("--benchmark", choices=sorted(PRESETS))
        sp.add_argument("--suite", help="baseline, adaptive, proactive, combined or reactive")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--cluster-size", dest="cluster_size", type=int)
        sp.add_argument("--max-cycles", dest="max_cycles", type=int)
        sp.add_argument("--output", "-o", help="output directory")

    sp = sub.add_parser("run", help="run one experiment and export its report")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="sweep cluster size, diffusion period or reconfiguration latency")
    common(sp)
    sp.add_argument("--cluster-sizes", type=int, nargs="+")
    sp.add_argument("--periods", type=int, nargs="+")
    sp.add_argument("--reconfig-latencies", type=int, nargs="+")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("compare", help="speedups of scheduler suites over the first one")
    common(sp)
    sp.add_argument("--suites", nargs="+")
    sp.add_argument("--benchmarks", nargs="+", choices=sorted(PRESETS))
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("wafer", help="run on a multi-die fabric")
    common(sp)
    sp.add_argument("--dies", type=int, nargs=2, default=[4, 4], metavar=("ROWS", "COLS"))
    sp.set_defaults(func=cmd_wafer)

    sp = sub.add_parser("validate", help="check an OWG file")
    sp.add_argument("graph")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("gen", help="write a preset's OWG, input trace and spec")
    sp.add_argument("benchmark", choices=sorted(PRESETS))
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--output", "-o")
    sp.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = args.func(args)
    except Exception as e:
        for cls, code in EXIT_CODES:
            if isinstance(e, cls):
                print(f"octosim: error: {e}", file=sys.stderr)
                return code
        print(f"octosim: unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
