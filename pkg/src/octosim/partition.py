"""Compile-time half of dual scheduling: sub-OWG partitioning, cluster
sizing and parallelism padding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .owg import NodeKind, OwgGraph, TaskProfile

PLAN_SCHEMA_VERSION = 1


class PlanError(Exception):
    """Raised when no feasible cluster plan exists."""


@dataclass(frozen=True)
class SubOwg:
    id: int
    task_blocks: tuple[str, ...]
    boundary_in: str
    boundary_out: str
    tbu_requirement: int = 0
    replication: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "task_blocks": list(self.task_blocks),
            "boundary_in": self.boundary_in,
            "boundary_out": self.boundary_out,
            "tbu_requirement": self.tbu_requirement,
            "replication": {tb: self.replication[tb] for tb in self.task_blocks},
        }

    @classmethod
    def from_dict(cls, d: dict) -> SubOwg:
        return cls(int(d["id"]), tuple(d["task_blocks"]), d["boundary_in"], d["boundary_out"],
                   int(d["tbu_requirement"]), {k: int(v) for k, v in d["replication"].items()})


@dataclass(frozen=True)
class ClusterPlan:
    cluster_size: int
    sub_owgs: tuple[SubOwg, ...]
    configurations: dict[int, tuple[int, ...]]

    def sub_of_tb(self) -> dict[str, int]:
        return {tb: s.id for s in self.sub_owgs for tb in s.task_blocks}

    def to_dict(self) -> dict:
        return {
            "schema_version": PLAN_SCHEMA_VERSION,
            "cluster_size": self.cluster_size,
            "sub_owgs": [s.to_dict() for s in self.sub_owgs],
            "configurations": {str(k): list(v) for k, v in sorted(self.configurations.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> ClusterPlan:
        if d.get("schema_version") != PLAN_SCHEMA_VERSION:
            raise PlanError(f"unsupported plan schema_version {d.get('schema_version')!r}")
        return cls(int(d["cluster_size"]), tuple(SubOwg.from_dict(s) for s in d["sub_owgs"]),
                   {int(k): tuple(v) for k, v in d["configurations"].items()})

    @classmethod
    def from_json(cls, text: str) -> ClusterPlan:
        return cls.from_dict(json.loads(text))


def partition(graph: OwgGraph) -> list[SubOwg]:
    """Cut the graph at every Control Block.  Task Blocks have a single input
    and output, so each CB-free region is a chain."""
    subs = []
    for nid in graph.topological_order():
        node = graph.node[nid]
        if node.kind != NodeKind.TASK:
            continue
        pred = graph.in_edges[nid][0].from_node
        if graph.node[pred].kind == NodeKind.TASK:
            continue
        chain = [nid]
        nxt = graph.next_node(nid)
        while graph.node[nxt].kind == NodeKind.TASK:
            chain.append(nxt)
            nxt = graph.next_node(nxt)
        subs.append(SubOwg(len(subs), tuple(chain), pred, nxt))
    return subs


def _tb_requirement(profile: TaskProfile, target_rate: float) -> int:
    return max(1, math.ceil(profile.expected_cycles() * target_rate - 1e-9))


def estimate_tbu_requirement(sub: SubOwg, profiles: dict[str, TaskProfile], target_rate: float) -> int:
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    return sum(_tb_requirement(profiles[tb], target_rate) for tb in sub.task_blocks)


def determine_cluster_size(subs) -> int:
    if not subs:
        raise ValueError("no sub-OWGs")
    return max(s.tbu_requirement for s in subs)


def pad_parallelism(sub: SubOwg, cluster_size: int, profiles: dict[str, TaskProfile]) -> SubOwg:
    """Greedily hand out spare TBUs to the TB with the highest expected cycles
    per replica (ties go to the earliest TB in the chain)."""
    rep = dict(sub.replication) or {tb: 1 for tb in sub.task_blocks}
    if sum(rep.values()) > cluster_size:
        # cluster forced below the estimate: refit from one TBU per TB
        if len(sub.task_blocks) > cluster_size:
            raise PlanError(f"sub-OWG {sub.id} has {len(sub.task_blocks)} task blocks, "
                            f"more than cluster size {cluster_size}")
        rep = {tb: 1 for tb in sub.task_blocks}
    weight = {tb: profiles[tb].expected_cycles() for tb in sub.task_blocks}
    while sum(rep.values()) < cluster_size:
        best = sub.task_blocks[0]
        for tb in sub.task_blocks[1:]:
            a, b = weight[tb] / rep[tb], weight[best] / rep[best]
            if a > b and not math.isclose(a, b, rel_tol=1e-12):
                best = tb
        rep[best] += 1
    return replace(sub, replication=rep, tbu_requirement=cluster_size)


def configuration_for(sub: SubOwg, profiles: dict[str, TaskProfile]) -> tuple[int, ...]:
    """Per-TBU config ids, row-major within the cluster, replicas contiguous."""
    out = []
    for tb in sub.task_blocks:
        out.extend([profiles[tb].config_id] * sub.replication[tb])
    return tuple(out)


def build_plan(graph: OwgGraph, profiles: dict[str, TaskProfile] | None = None,
               target_rate: float = 1e-3, cluster_size: int | None = None) -> ClusterPlan:
    """partition -> estimate -> determine -> pad.

    ``cluster_size`` overrides the derived size (used by cluster-size sweeps).
    """
    profiles = profiles or graph.profiles()
    subs = []
    for s in partition(graph):
        reps = {tb: _tb_requirement(profiles[tb], target_rate) for tb in s.task_blocks}
        subs.append(replace(s, replication=reps, tbu_requirement=sum(reps.values())))
    if not subs:
        raise PlanError("graph has no task blocks")
    size = cluster_size or determine_cluster_size(subs)
    padded = tuple(pad_parallelism(s, size, profiles) for s in subs)
    configs = {s.id: configuration_for(s, profiles) for s in padded}
    return ClusterPlan(size, padded, configs)
