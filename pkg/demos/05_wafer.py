"""A 4x4-die wafer: print the per-die mean utilization as a small grid."""

import statistics

from octosim.experiments import ExperimentConfig, wafer_mode
from octosim.metrics import utilization

rep = wafer_mode(ExperimentConfig(benchmark="ER", suite="combined",
                                  benchmark_overrides={"packets_per_stream": 20}))
per_die = {}
for c, u in zip(rep.cluster_counters, utilization(rep, "cluster")):
    per_die.setdefault((c["die_row"], c["die_col"]), []).append(u)
print(f"{rep.total_cycles} cycles, cluster grid {rep.cluster_grid}")
for r in range(4):
    print("  ".join(f"{statistics.mean(per_die[(r, c)]):.2f}" for c in range(4)))
