"""Run reports, utilization, speedups and file exports.

Utilization counts busy (computing) cycles only; stall and reconfiguration
cycles are kept apart in the breakdown.

Export schemas (``REPORT_SCHEMA_VERSION``):

summary.json
    every RunReport field, keys sorted.
breakdown.csv
    ``tbu,row,col,cluster,busy,idle,stall,reconfig,utilization`` one row per TBU.
epochs.csv
    ``cluster,cluster_row,cluster_col,die_row,die_col,epoch,start_cycle,cycles,busy,utilization``
    one row per (cluster, epoch).
heatmap.csv
    ``epoch,row,col,utilization`` on the cluster grid, one row per
    (epoch, cluster); rows x cols x epochs values in total.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

REPORT_SCHEMA_VERSION = 1
PHASES = ("busy", "idle", "stall", "reconfig")


class ReportError(Exception):
    pass


@dataclass
class RunReport:
    total_cycles: int
    drained: bool
    packets_injected: int
    packets_completed: int
    tbu_counters: list[dict]
    cluster_counters: list[dict]
    cluster_size: int
    cluster_grid: tuple[int, int]
    load_movement_bytes: dict
    reconfig_count: int
    epoch_cycles: int
    epoch_busy: list[list[int]]
    counters: dict
    workload_hash: str = ""
    seed: int = 0
    config: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def n_epochs(self) -> int:
        return -(-self.total_cycles // self.epoch_cycles) if self.total_cycles else 0

    def epoch_utilization(self) -> list[list[float]]:
        """[cluster][epoch] busy fraction."""
        out = []
        E, T = self.epoch_cycles, self.total_cycles
        for bins in self.epoch_busy:
            row = []
            for e in range(self.n_epochs):
                span = min(T, (e + 1) * E) - e * E
                b = bins[e] if e < len(bins) else 0
                row.append(b / (span * self.cluster_size))
            out.append(row)
        return out

    def check(self) -> None:
        """Counter closure and conservation."""
        for c in self.tbu_counters:
            if sum(c[p] for p in PHASES) != self.total_cycles:
                raise ReportError(f"TBU {c['tbu']} counters do not sum to {self.total_cycles}")
        if self.drained and self.packets_completed != self.packets_injected:
            raise ReportError(f"drained run completed {self.packets_completed} of "
                              f"{self.packets_injected} packets")
        for u in (u for row in self.epoch_utilization() for u in row):
            if not 0.0 <= u <= 1.0 + 1e-12:
                raise ReportError(f"epoch utilization {u} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cluster_grid"] = list(self.cluster_grid)
        d["utilization"] = utilization(self)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ReportError(f"unsupported report schema_version {d.get('schema_version')!r}")
        d = dict(d)
        d.pop("utilization", None)
        d["cluster_grid"] = tuple(d["cluster_grid"])
        return cls(**d)


def make_report(fabric, workload_hash: str = "", config: dict | None = None) -> RunReport:
    """Snapshot a fabric after ``run``."""
    T = fabric.now
    counters = fabric.flushed_counters(T)
    tbus = []
    for x, c in zip(fabric.tbus, counters):
        tbus.append({"tbu": x.idx, "row": x.coord[0], "col": x.coord[1], "cluster": x.cluster,
                     **dict(zip(("idle", "busy", "stall", "reconfig"), c)),
                     "reconfigs": x.reconfig_count, "executed": x.executed})
    clusters = []
    for cl in fabric.clusters:
        agg = {p: sum(tbus[m][p] for m in cl.members) for p in PHASES}
        clusters.append({"cluster": cl.idx, "row": cl.origin[0] // cl.shape[0],
                         "col": cl.origin[1] // cl.shape[1], "die_row": cl.die[0],
                         "die_col": cl.die[1], "switches": cl.switches, **agg})
    # close any busy interval still open at the end of the run
    epoch_busy = [list(b) for b in fabric.epoch_busy]
    E = fabric.config.epoch_cycles
    for x in fabric.tbus:
        if x.state == 1 and x.phase_start < T:
            start = x.phase_start
            bins = epoch_busy[x.cluster]
            while start < T:
                e = start // E
                stop = min(T, (e + 1) * E)
                while len(bins) <= e:
                    bins.append(0)
                bins[e] += stop - start
                start = stop
    k = fabric.counters
    moved = {"diffusive": k["diffusive_bytes"], "reactive": k["reactive_bytes"],
             "rebind": k["rebind_bytes"], "pipeline": k["pipeline_bytes"]}
    return RunReport(
        total_cycles=T,
        drained=fabric.drained(),
        packets_injected=fabric.n_expected if fabric.drained() else fabric.n_injected,
        packets_completed=fabric.sink_count,
        tbu_counters=tbus,
        cluster_counters=clusters,
        cluster_size=fabric.plan.cluster_size,
        cluster_grid=tuple(fabric.cluster_grid),
        load_movement_bytes=moved,
        reconfig_count=sum(x.reconfig_count for x in fabric.tbus),
        epoch_cycles=E,
        epoch_busy=epoch_busy,
        counters=dict(sorted(k.items())),
        workload_hash=workload_hash,
        seed=fabric.seed,
        config=config or {},
    )


def utilization(report: RunReport, scope: str = "fabric", index: int | None = None):
    """Busy fraction for one TBU, one cluster or the whole fabric.  With
    ``index=None`` the TBU/cluster scopes return the full list."""
    T = report.total_cycles
    if scope == "fabric":
        if T == 0 or not report.tbu_counters:
            return 0.0
        return sum(c["busy"] for c in report.tbu_counters) / (T * len(report.tbu_counters))
    if scope == "tbu":
        vals = [c["busy"] / T if T else 0.0 for c in report.tbu_counters]
    elif scope == "cluster":
        vals = [c["busy"] / (T * report.cluster_size) if T else 0.0 for c in report.cluster_counters]
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return vals if index is None else vals[index]


def speedup(baseline: RunReport, candidate: RunReport) -> float:
    if baseline.workload_hash != candidate.workload_hash:
        raise ReportError("speedup needs identical workloads "
                          f"({baseline.workload_hash} != {candidate.workload_hash})")
    if candidate.total_cycles == 0:
        return 1.0 if baseline.total_cycles == 0 else math.inf
    return baseline.total_cycles / candidate.total_cycles


def geomean(values) -> float:
    vals = list(values)
    if not vals:
        raise ValueError("geomean of an empty set")
    return math.exp(math.fsum(math.log(v) for v in vals) / len(vals))


# ----------------------------------------------------------------------
# exports

def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def breakdown_csv(report: RunReport) -> str:
    T = report.total_cycles
    rows = [[c["tbu"], c["row"], c["col"], c["cluster"], c["busy"], c["idle"], c["stall"],
             c["reconfig"], repr(c["busy"] / T if T else 0.0)] for c in report.tbu_counters]
    return _csv(rows, ["tbu", "row", "col", "cluster", *PHASES, "utilization"])


def epochs_csv(report: RunReport) -> str:
    util = report.epoch_utilization()
    E, T = report.epoch_cycles, report.total_cycles
    rows = []
    for cl, u in zip(report.cluster_counters, util):
        bins = report.epoch_busy[cl["cluster"]]
        for e, val in enumerate(u):
            rows.append([cl["cluster"], cl["row"], cl["col"], cl["die_row"], cl["die_col"], e,
                         e * E, min(T, (e + 1) * E) - e * E, bins[e] if e < len(bins) else 0, repr(val)])
    return _csv(rows, ["cluster", "cluster_row", "cluster_col", "die_row", "die_col", "epoch",
                       "start_cycle", "cycles", "busy", "utilization"])


def heatmap_csv(report: RunReport) -> str:
    util = report.epoch_utilization()
    order = sorted(report.cluster_counters, key=lambda c: (c["row"], c["col"]))
    rows = []
    for e in range(report.n_epochs):
        for cl in order:
            rows.append([e, cl["row"], cl["col"], repr(util[cl["cluster"]][e])])
    return _csv(rows, ["epoch", "row", "col", "utilization"])


def export(report: RunReport, outdir, formats=("summary", "breakdown", "epochs", "heatmap")) -> list[Path]:
    """Write the requested files into ``outdir``; returns their paths."""
    report.check()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    writers = {
        "summary": ("summary.json", lambda: report.to_json() + "\n"),
        "breakdown": ("breakdown.csv", lambda: breakdown_csv(report)),
        "epochs": ("epochs.csv", lambda: epochs_csv(report)),
        "heatmap": ("heatmap.csv", lambda: heatmap_csv(report)),
    }
    paths = []
    for fmt in formats:
        if fmt not in writers:
            raise ValueError(f"unknown export format {fmt!r}")
        name, render = writers[fmt]
        p = outdir / name
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_text(render())
        os.replace(tmp, p)
        paths.append(p)
    return paths
