"""Diffusion period sweep: too frequent and the fabric pays for
reconfiguration, too rare and load stays uneven."""

import statistics

from octosim.experiments import run
from octosim.metrics import utilization
from octosim.scenarios import INTERVAL_PERIODS, interval_config
from octosim.workloads import PRESETS

for p in INTERVAL_PERIODS:
    vals = [utilization(run(interval_config(b, p))) for b in sorted(PRESETS)]
    print(f"period {p:>9d}  mean utilization {statistics.mean(vals):.3f}  "
          + " ".join(f"{b}:{v:.2f}" for b, v in zip(sorted(PRESETS), vals)))
