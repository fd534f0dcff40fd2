"""Calibrated experiment setups used by the acceptance suite and the demos.

Each builder returns plain library objects so the same scenario can be run
from tests, scripts or an interactive session.
"""

from __future__ import annotations

from .experiments import ExperimentConfig
from .fabric import Fabric, FabricConfig
from .owg import DataPacket
from .partition import build_plan
from .schedulers import suite_from
from .workloads import chain_workload

# ----------------------------------------------------------------------
# adaptive TBU scheduling inside one cluster

# Three-TB chain on one 2x4 cluster.  "emotion": the middle TB doubles its
# cycles half way through the run.  "skewed": the middle TB alternates a
# short heavy phase (10% of packets at 9.1x mean) with a long light phase,
# and packets are large so queues hold only a few of them.
ADAPTIVE_VARIANTS = {
    "emotion": dict(cycles=(4000, 12000, 4000), n_packets=400, packet_bytes=16 * 1024),
    "skewed": dict(cycles=(4000, 24000, 4000), n_packets=2000, packet_bytes=256 * 1024),
}


def _middle_trace(variant: str, n: int):
    if variant == "emotion":
        return [8000] * (n // 2) + [16000] * (n - n // 2)
    # traces index modulo their length, so one period repeats
    period = 1000
    return [218400] * (period // 10) + [2400] * (period - period // 10)


def adaptive_scenario(variant: str = "emotion"):
    """Returns (graph, schedule, plan, config) for a single-cluster run."""
    try:
        v = ADAPTIVE_VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(ADAPTIVE_VARIANTS)}") from None
    graph, sched = chain_workload(v["cycles"], v["n_packets"], v["packet_bytes"],
                                  traces={1: _middle_trace(variant, v["n_packets"])})
    plan = build_plan(graph, target_rate=1e-3, cluster_size=8)
    return graph, sched, plan, FabricConfig(tbu_grid=(2, 4))


def run_adaptive(variant: str, suite: str, trace: bool = False) -> Fabric:
    graph, sched, plan, cfg = adaptive_scenario(variant)
    f = Fabric(cfg, plan, graph, suite_from(suite), trace=trace)
    f.attach(sched)
    f.run()
    return f


# ----------------------------------------------------------------------
# diffusion period sweep

# Each input stream enters at one cluster, so load starts out uneven and
# balancing pays off; reconfiguration sits at the top of the documented
# 100-10000 cycle range so that frequent rebalancing has a visible price.
INTERVAL_PERIODS = (10_000, 100_000, 1_000_000, 10_000_000)
INTERVAL_FABRIC = {"injection_mode": "stream", "reconfig_latency": 10_000}
INTERVAL_OVERRIDES = {"stream_count": 8}


def interval_config(benchmark: str, period: int, seed: int = 1, suite: str = "proactive") -> ExperimentConfig:
    return ExperimentConfig(benchmark=benchmark, suite=suite, seed=seed,
                            fabric={**INTERVAL_FABRIC, "diffusion_period": period},
                            benchmark_overrides=dict(INTERVAL_OVERRIDES))


# ----------------------------------------------------------------------
# static neutrality

def static_scenario(n_packets: int = 800):
    """Constant-time three-TB chain with a balanced plan, no Control Blocks.
    Returns (graph, schedule, plan)."""
    graph, sched = chain_workload((1000, 2000, 1000), n_packets)
    return graph, sched, build_plan(graph, target_rate=1e-3)


# ----------------------------------------------------------------------
# diffusive equilibrium

EQUILIBRIUM_PACKET = 16 * 1024


def equilibrium_fabric(counts, suite: str = "proactive") -> Fabric:
    """Eight single-TB clusters (2x4 tiles on an 8x8 grid) whose TBUs never
    finish, preloaded with ``counts[c]`` packets at cluster ``c`` and no
    further injection."""
    graph, _ = chain_workload((10 ** 9,), 0, EQUILIBRIUM_PACKET)
    plan = build_plan(graph, target_rate=8e-9)
    f = Fabric(FabricConfig(livelock_window=10 ** 10), plan, graph, suite_from(suite))
    f.attach([])
    q = 0
    for c, n in enumerate(counts):
        for _ in range(n):
            f.inject(DataPacket(0, q, (), EQUILIBRIUM_PACKET), cluster=c)
            q += 1
    return f


def cluster_loads(f: Fabric, sub: int = 0) -> list[int]:
    return [f.queues[(c, sub, 0)].bytes for c in range(len(f.clusters))]


def grid_diameter(f: Fabric) -> int:
    return sum(n - 1 for n in f.cluster_grid)
