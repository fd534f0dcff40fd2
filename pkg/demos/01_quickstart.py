"""Run one preset under the baseline and the combined scheduler suites and
print the cycle counts, the speedup and where each TBU spent its time."""

from octosim.experiments import ExperimentConfig, run
from octosim.metrics import speedup, utilization

cfg = dict(benchmark="ER", seed=1)
base = run(ExperimentConfig(suite="baseline", **cfg))
comb = run(ExperimentConfig(suite="combined", **cfg))

for name, rep in (("baseline", base), ("combined", comb)):
    phases = {k: sum(c[k] for c in rep.tbu_counters) for k in ("busy", "idle", "stall", "reconfig")}
    total = sum(phases.values())
    share = ", ".join(f"{k} {v / total:.1%}" for k, v in phases.items())
    print(f"{name:9s} {rep.total_cycles:>9d} cycles  utilization {utilization(rep):.3f}  ({share})")
print(f"speedup {speedup(base, comb):.2f}x")
