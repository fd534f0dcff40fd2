"""Orchestrated Workflow Graph model.

An OWG is a DAG whose nodes are Task Blocks (compute) and Control Blocks
(Route/Merge, Expand/Collapse) and whose edges are Task Flows.  Packets flow
from a single source node to a single sink node.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from .rng import packet_rng

OWG_SCHEMA_VERSION = 1


class WorkloadError(Exception):
    """Raised when a packet cannot be processed by the graph semantics."""


class ConfigError(Exception):
    """Raised for malformed graph/trace/configuration inputs."""


class NodeKind(str, Enum):
    SOURCE = "source"
    SINK = "sink"
    TASK = "task"
    ROUTE = "route"
    MERGE = "merge"
    EXPAND = "expand"
    COLLAPSE = "collapse"


CONTROL_KINDS = (NodeKind.ROUTE, NodeKind.MERGE, NodeKind.EXPAND, NodeKind.COLLAPSE)


def _ceil_cycles(x: float) -> int:
    # tolerate float noise such as 100 * 1.5 == 150.00000000000003
    return max(1, math.ceil(x - 1e-9))


@dataclass(frozen=True)
class ExecTimeModel:
    """Per-packet execution time model, a multiplier on the base cycles.

    ``trace`` overrides the base cycles directly: packet ``seq`` takes
    ``trace[seq % len(trace)]`` cycles.
    """

    kind: str = "constant"
    lo: float = 1.0
    hi: float = 1.0
    mu: float = 0.0
    sigma: float = 0.0
    trace: tuple[int, ...] = ()

    @classmethod
    def constant(cls) -> ExecTimeModel:
        return cls("constant")

    @classmethod
    def uniform(cls, lo: float, hi: float) -> ExecTimeModel:
        return cls("uniform", lo=lo, hi=hi)

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> ExecTimeModel:
        return cls("lognormal", mu=mu, sigma=sigma)

    @classmethod
    def from_trace(cls, cycles) -> ExecTimeModel:
        return cls("trace", trace=tuple(int(c) for c in cycles))

    def check(self) -> list[str]:
        errs = []
        if self.kind not in ("constant", "uniform", "lognormal", "trace"):
            errs.append(f"unknown exec model kind {self.kind!r}")
        if self.kind == "uniform" and not (0 < self.lo <= self.hi):
            errs.append(f"uniform factor range must satisfy 0 < lo <= hi, got ({self.lo}, {self.hi})")
        if self.kind == "lognormal" and self.sigma < 0:
            errs.append("lognormal sigma must be >= 0")
        if self.kind == "trace":
            if not self.trace:
                errs.append("empty exec trace")
            elif min(self.trace) < 1:
                errs.append("exec trace entries must be >= 1")
        return errs

    def mean_factor(self, base_cycles: int) -> float:
        """Expected multiplier on ``base_cycles``."""
        if self.kind == "uniform":
            return (self.lo + self.hi) / 2
        if self.kind == "lognormal":
            return math.exp(self.mu + self.sigma**2 / 2)
        if self.kind == "trace":
            return sum(self.trace) / len(self.trace) / base_cycles
        return 1.0

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "uniform":
            d.update(lo=self.lo, hi=self.hi)
        elif self.kind == "lognormal":
            d.update(mu=self.mu, sigma=self.sigma)
        elif self.kind == "trace":
            d["trace"] = list(self.trace)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExecTimeModel:
        kind = d.get("kind", "constant")
        if kind == "trace":
            if "trace_file" in d:
                return cls.from_trace(load_exec_trace(d["trace_file"]))
            return cls.from_trace(d.get("trace", ()))
        return cls(kind, lo=d.get("lo", 1.0), hi=d.get("hi", 1.0),
                   mu=d.get("mu", 0.0), sigma=d.get("sigma", 0.0))


@dataclass(frozen=True)
class TaskProfile:
    base_cycles_per_packet: int
    dynamicity: ExecTimeModel = field(default_factory=ExecTimeModel.constant)
    tbu_requirement: int = 1
    packet_out_size: int = 16384
    config_id: int = 0

    def expected_cycles(self) -> float:
        return self.base_cycles_per_packet * self.dynamicity.mean_factor(self.base_cycles_per_packet)

    def to_dict(self) -> dict:
        return {
            "base_cycles_per_packet": self.base_cycles_per_packet,
            "dynamicity": self.dynamicity.to_dict(),
            "tbu_requirement": self.tbu_requirement,
            "packet_out_size": self.packet_out_size,
            "config_id": self.config_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TaskProfile:
        return cls(
            base_cycles_per_packet=int(d["base_cycles_per_packet"]),
            dynamicity=ExecTimeModel.from_dict(d.get("dynamicity", {})),
            tbu_requirement=int(d.get("tbu_requirement", 1)),
            packet_out_size=int(d.get("packet_out_size", 16384)),
            config_id=int(d.get("config_id", 0)),
        )


@dataclass(frozen=True)
class ControlPolicy:
    """Decision policy of a Route or Expand node.

    Route: either ``weights`` (categorical over out-edges) or ``tag`` +
    ``tag_map`` (meta value -> out-edge index).
    Expand: either ``poisson_lam`` (truncated at ``cap``) or ``tag`` (the
    meta value is the count, clamped to ``cap``).
    ``expected`` optionally overrides the planning-time expectation (branch
    probabilities for routes, mean fanout for expands) of tag-driven policies.
    """

    weights: tuple[float, ...] | None = None
    tag: str | None = None
    tag_map: dict[int, int] | None = None
    poisson_lam: float | None = None
    cap: int = 8
    expected: tuple[float, ...] | float | None = None

    def to_dict(self) -> dict:
        d = {}
        if self.weights is not None:
            d["weights"] = list(self.weights)
        if self.tag is not None:
            d["tag"] = self.tag
        if self.tag_map is not None:
            d["tag_map"] = {str(k): v for k, v in sorted(self.tag_map.items())}
        if self.poisson_lam is not None:
            d["poisson_lam"] = self.poisson_lam
        d["cap"] = self.cap
        if self.expected is not None:
            d["expected"] = list(self.expected) if isinstance(self.expected, tuple) else self.expected
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ControlPolicy:
        exp = d.get("expected")
        return cls(
            weights=tuple(d["weights"]) if "weights" in d else None,
            tag=d.get("tag"),
            tag_map={int(k): int(v) for k, v in d["tag_map"].items()} if "tag_map" in d else None,
            poisson_lam=d.get("poisson_lam"),
            cap=int(d.get("cap", 8)),
            expected=tuple(exp) if isinstance(exp, list) else exp,
        )


@dataclass(frozen=True)
class OwgNode:
    id: str
    kind: NodeKind
    task_profile: TaskProfile | None = None
    control_policy: ControlPolicy | None = None


@dataclass(frozen=True)
class TaskFlowEdge:
    id: str
    from_node: str
    to_node: str


@dataclass(frozen=True, slots=True)
class DataPacket:
    """A unit of work.  ``lineage`` holds one (expand_id, index, count)
    record per enclosing Expand scope."""

    stream_id: int
    seq: int
    lineage: tuple = ()
    size_bytes: int = 16384
    meta: tuple = ()  # sorted (tag, value) pairs

    def tag(self, name: str):
        for k, v in self.meta:
            if k == name:
                return v
        return None

    @property
    def weight(self):
        """Fraction of an injected packet this packet stands for."""
        w = Fraction(1)
        for _, _, count in self.lineage:
            w /= count
        return w

    def ident(self) -> str:
        return f"stream={self.stream_id} seq={self.seq} lineage={list(self.lineage)}"


def make_meta(d: dict | None) -> tuple:
    return tuple(sorted((d or {}).items()))


class OwgGraph:
    def __init__(self, nodes, edges, source_node_id: str, sink_node_id: str):
        self.nodes: list[OwgNode] = list(nodes)
        self.edges: list[TaskFlowEdge] = list(edges)
        self.source_node_id = source_node_id
        self.sink_node_id = sink_node_id
        self.node = {n.id: n for n in self.nodes}
        self.out_edges: dict[str, list[TaskFlowEdge]] = {n.id: [] for n in self.nodes}
        self.in_edges: dict[str, list[TaskFlowEdge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            if e.from_node in self.out_edges:
                self.out_edges[e.from_node].append(e)
            if e.to_node in self.in_edges:
                self.in_edges[e.to_node].append(e)
        self._pairs = None

    # -- structure helpers ---------------------------------------------
    def successors(self, node_id: str) -> list[str]:
        return [e.to_node for e in self.out_edges[node_id]]

    def next_node(self, node_id: str) -> str:
        return self.out_edges[node_id][0].to_node

    def task_blocks(self) -> list[str]:
        return [nid for nid in self.topological_order() if self.node[nid].kind == NodeKind.TASK]

    def profiles(self) -> dict[str, TaskProfile]:
        return {n.id: n.task_profile for n in self.nodes if n.kind == NodeKind.TASK}

    def topological_order(self) -> list[str]:
        indeg = {n.id: len(self.in_edges[n.id]) for n in self.nodes}
        ready = deque(n.id for n in self.nodes if indeg[n.id] == 0)
        order = []
        while ready:
            nid = ready.popleft()
            order.append(nid)
            for succ in self.successors(nid):
                indeg[succ] -= 1
                if indeg[succ] == 0:
                    ready.append(succ)
        return order

    def pairs(self) -> dict[str, str]:
        """Route -> Merge and Expand -> Collapse matching (valid graphs)."""
        if self._pairs is None:
            pairs, errors = _match_scopes(self)
            if errors:
                raise ConfigError("; ".join(errors))
            self._pairs = pairs
        return self._pairs

    def with_profiles(self, profiles: dict[str, TaskProfile]) -> OwgGraph:
        nodes = [OwgNode(n.id, n.kind, profiles.get(n.id, n.task_profile), n.control_policy)
                 for n in self.nodes]
        return OwgGraph(nodes, self.edges, self.source_node_id, self.sink_node_id)

    # -- serialisation -------------------------------------------------
    def to_dict(self) -> dict:
        nodes = []
        for n in self.nodes:
            d = {"id": n.id, "kind": n.kind.value}
            if n.task_profile is not None:
                d["task_profile"] = n.task_profile.to_dict()
            if n.control_policy is not None:
                d["control_policy"] = n.control_policy.to_dict()
            nodes.append(d)
        return {
            "schema_version": OWG_SCHEMA_VERSION,
            "nodes": nodes,
            "edges": [{"id": e.id, "from": e.from_node, "to": e.to_node} for e in self.edges],
            "source": self.source_node_id,
            "sink": self.sink_node_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> OwgGraph:
        if d.get("schema_version") != OWG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported OWG schema_version {d.get('schema_version')!r}")
        try:
            nodes = []
            for nd in d["nodes"]:
                kind = NodeKind(nd["kind"])
                tp = TaskProfile.from_dict(nd["task_profile"]) if "task_profile" in nd else None
                cp = ControlPolicy.from_dict(nd["control_policy"]) if "control_policy" in nd else None
                nodes.append(OwgNode(nd["id"], kind, tp, cp))
            edges = [TaskFlowEdge(e["id"], e["from"], e["to"]) for e in d["edges"]]
            return cls(nodes, edges, d["source"], d["sink"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"malformed OWG definition: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def __eq__(self, other):
        return isinstance(other, OwgGraph) and self.to_dict() == other.to_dict()


def save_graph(graph: OwgGraph, path) -> None:
    Path(path).write_text(graph.to_json())


def load_graph(path) -> OwgGraph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return OwgGraph.from_dict(data)


def load_exec_trace(path) -> list[int]:
    """Per-packet cycle counts: text (one integer per line) or raw little-endian u32."""
    raw = Path(path).read_bytes()
    try:
        values = [int(tok) for tok in raw.decode("ascii").split()]
    except (UnicodeDecodeError, ValueError):
        if len(raw) % 4:
            raise ConfigError(f"{path}: binary trace length {len(raw)} is not a multiple of 4")
        values = np.frombuffer(raw, dtype="<u4").astype(int).tolist()
    if not values:
        raise ConfigError(f"{path}: empty exec trace")
    return values


# -- validation ----------------------------------------------------------

@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def _walk_scope(graph: OwgGraph, start: str, pairs: dict, errors: list, depth=0):
    """Follow a path from ``start`` until it hits a closing node
    (Merge/Collapse/Sink) that belongs to an enclosing scope."""
    nid = start
    steps = 0
    while True:
        steps += 1
        if steps > 4 * len(graph.nodes) + 4 or depth > len(graph.nodes):
            errors.append("cycle or runaway path while matching scopes")
            return None
        node = graph.node.get(nid)
        if node is None:
            return None
        kind = node.kind
        if kind in (NodeKind.MERGE, NodeKind.COLLAPSE, NodeKind.SINK):
            return nid
        outs = graph.successors(nid)
        if kind == NodeKind.ROUTE:
            ends = [_walk_scope(graph, s, pairs, errors, depth + 1) for s in outs]
            ends_set = set(ends)
            if len(ends_set) != 1 or None in ends_set or graph.node[ends[0]].kind != NodeKind.MERGE:
                errors.append(f"unpaired Route {nid}: branches end at {sorted(str(e) for e in ends_set)}")
                return None
            merge = ends[0]
            if len(graph.in_edges[merge]) != len(outs):
                errors.append(f"unpaired Merge {merge}: in-degree does not match Route {nid}")
            if merge in pairs.values():
                errors.append(f"unpaired Merge {merge}: closes more than one Route")
            pairs[nid] = merge
            nxt = graph.successors(merge)
        elif kind == NodeKind.EXPAND:
            end = _walk_scope(graph, outs[0], pairs, errors, depth + 1) if outs else None
            if end is None or graph.node[end].kind != NodeKind.COLLAPSE:
                errors.append(f"unpaired Expand {nid}: scope ends at {end}")
                return None
            if end in pairs.values():
                errors.append(f"unpaired Collapse {end}: closes more than one Expand")
            pairs[nid] = end
            nxt = graph.successors(end)
        else:
            nxt = outs
        if len(nxt) != 1:
            return None
        nid = nxt[0]


def _match_scopes(graph: OwgGraph):
    pairs: dict[str, str] = {}
    errors: list[str] = []
    src = graph.node.get(graph.source_node_id)
    if src is None or not graph.successors(src.id):
        return pairs, ["source has no outgoing Task Flow"]
    end = _walk_scope(graph, graph.successors(src.id)[0], pairs, errors)
    if end is not None and end != graph.sink_node_id:
        kind = graph.node[end].kind.value.capitalize()
        errors.append(f"unpaired {kind} {end}: closes no open scope")
    closers = set(pairs.values())
    for n in graph.nodes:
        if n.kind in (NodeKind.MERGE, NodeKind.COLLAPSE) and n.id not in closers:
            msg = f"unpaired {n.kind.value.capitalize()} {n.id}"
            if not any(msg in e for e in errors):
                errors.append(msg)
    return pairs, errors


def validate(graph: OwgGraph) -> ValidationReport:
    """Check every structural and policy rule; never raises."""
    v: list[str] = []
    ids = [n.id for n in graph.nodes]
    if len(set(ids)) != len(ids):
        v.append("duplicate node ids")
    eids = [e.id for e in graph.edges]
    if len(set(eids)) != len(eids):
        v.append("duplicate edge ids")
    for e in graph.edges:
        if e.from_node not in graph.node or e.to_node not in graph.node:
            v.append(f"edge {e.id} has a dangling endpoint")
    if v:
        return ValidationReport(v)

    sources = [n.id for n in graph.nodes if n.kind == NodeKind.SOURCE]
    sinks = [n.id for n in graph.nodes if n.kind == NodeKind.SINK]
    if sources != [graph.source_node_id]:
        v.append(f"source: expected exactly one source node {graph.source_node_id!r}, found {sources}")
    if sinks != [graph.sink_node_id]:
        v.append(f"sink: expected exactly one sink node {graph.sink_node_id!r}, found {sinks}")

    order = graph.topological_order()
    acyclic = len(order) == len(graph.nodes)
    if not acyclic:
        v.append("cycle: graph is not acyclic")

    for n in graph.nodes:
        nin, nout = len(graph.in_edges[n.id]), len(graph.out_edges[n.id])
        want = {
            NodeKind.SOURCE: (0, 1), NodeKind.SINK: (1, 0), NodeKind.TASK: (1, 1),
            NodeKind.EXPAND: (1, 1), NodeKind.COLLAPSE: (1, 1),
        }.get(n.kind)
        if want is not None and (nin, nout) != want:
            v.append(f"degree: {n.kind.value} {n.id} has in={nin} out={nout}, expected in={want[0]} out={want[1]}")
        if n.kind == NodeKind.ROUTE and (nin != 1 or nout < 2):
            v.append(f"degree: route {n.id} needs in=1 and out>=2, has in={nin} out={nout}")
        if n.kind == NodeKind.MERGE and (nin < 2 or nout != 1):
            v.append(f"degree: merge {n.id} needs in>=2 and out=1, has in={nin} out={nout}")

        if n.kind == NodeKind.TASK:
            p = n.task_profile
            if p is None:
                v.append(f"profile: task {n.id} has no task profile")
            else:
                if p.base_cycles_per_packet < 1:
                    v.append(f"profile: task {n.id} base_cycles_per_packet < 1")
                if p.tbu_requirement < 1:
                    v.append(f"profile: task {n.id} tbu_requirement < 1")
                if p.packet_out_size < 1:
                    v.append(f"profile: task {n.id} packet_out_size < 1")
                v.extend(f"profile: task {n.id}: {err}" for err in p.dynamicity.check())
        if n.kind in (NodeKind.ROUTE, NodeKind.EXPAND):
            v.extend(f"policy: {n.kind.value} {n.id}: {err}" for err in _check_policy(n, nout))

    cfg_ids = [n.task_profile.config_id for n in graph.nodes
               if n.kind == NodeKind.TASK and n.task_profile is not None]
    if len(set(cfg_ids)) != len(cfg_ids):
        v.append("profile: task config_ids are not unique")

    # reachability both ways
    if graph.source_node_id in graph.node and graph.sink_node_id in graph.node:
        fwd = _reach(graph.source_node_id, graph.successors)
        bwd = _reach(graph.sink_node_id, lambda x: [e.from_node for e in graph.in_edges[x]])
        for n in graph.nodes:
            if n.id not in fwd:
                v.append(f"unreachable: {n.id} is not reachable from the source")
            if n.id not in bwd:
                v.append(f"unreachable: {n.id} does not reach the sink")

    if acyclic:
        _, errors = _match_scopes(graph)
        v.extend(errors)
    return ValidationReport(v)


def _reach(start, nbrs):
    seen = {start}
    todo = [start]
    while todo:
        for m in nbrs(todo.pop()):
            if m not in seen:
                seen.add(m)
                todo.append(m)
    return seen


def _check_policy(node: OwgNode, nout: int) -> list[str]:
    p = node.control_policy
    if p is None:
        return ["missing control policy"]
    errs = []
    if node.kind == NodeKind.ROUTE:
        if p.weights is None and (p.tag is None or p.tag_map is None):
            errs.append("route needs branch weights or a tag map")
        if p.weights is not None:
            if len(p.weights) != nout:
                errs.append(f"{len(p.weights)} branch weights for {nout} out-edges")
            if any(w < 0 for w in p.weights) or abs(sum(p.weights) - 1.0) > 1e-9:
                errs.append(f"branch weights must be non-negative and sum to 1, got {p.weights}")
        if p.tag_map is not None and any(not 0 <= i < nout for i in p.tag_map.values()):
            errs.append("tag map refers to a missing out-edge")
    else:
        if p.poisson_lam is None and p.tag is None:
            errs.append("expand needs a poisson fanout or a count tag")
        if p.poisson_lam is not None and p.poisson_lam < 0:
            errs.append("poisson lambda must be >= 0")
        if p.cap < 0:
            errs.append("fanout cap must be >= 0")
    return errs


# -- dynamicity ----------------------------------------------------------

def sample_exec_cycles(profile: TaskProfile, packet: DataPacket, rng: np.random.Generator) -> int:
    m = profile.dynamicity
    base = profile.base_cycles_per_packet
    if m.kind == "constant":
        return base
    if m.kind == "trace":
        return m.trace[packet.seq % len(m.trace)]
    if m.kind == "uniform":
        factor = m.lo + (m.hi - m.lo) * rng.random()
    else:
        factor = math.exp(m.mu + m.sigma * rng.standard_normal())
    return _ceil_cycles(base * factor)


def route_decide(policy: ControlPolicy, packet: DataPacket, rng: np.random.Generator) -> int:
    if policy.tag_map is not None:
        value = packet.tag(policy.tag)
        if value is None or value not in policy.tag_map:
            raise WorkloadError(f"route tag {policy.tag!r}={value!r} unmapped for packet {packet.ident()}")
        return policy.tag_map[value]
    u = rng.random()
    acc = 0.0
    for i, w in enumerate(policy.weights):
        acc += w
        if u < acc:
            return i
    # u fell into the rounding slack past the last positive weight
    return max(i for i, w in enumerate(policy.weights) if w > 0)


def truncated_poisson_cdf(lam: float, cap: int) -> list[float]:
    pmf = [math.exp(-lam)]
    for k in range(1, cap + 1):
        pmf.append(pmf[-1] * lam / k)
    total = sum(pmf)
    out, acc = [], 0.0
    for p in pmf:
        acc += p / total
        out.append(acc)
    return out


def expand_count(policy: ControlPolicy, packet: DataPacket, rng: np.random.Generator) -> int:
    if policy.tag is not None:
        value = packet.tag(policy.tag)
        if value is None:
            raise WorkloadError(f"expand tag {policy.tag!r} missing for packet {packet.ident()}")
        return max(0, min(int(value), policy.cap))
    # inverse-cdf draw from Poisson(lam) conditioned on <= cap
    u = rng.random()
    for k, c in enumerate(truncated_poisson_cdf(policy.poisson_lam, policy.cap)):
        if u < c:
            return k
    return policy.cap


def expected_branch_probs(policy: ControlPolicy, nout: int) -> list[float]:
    if isinstance(policy.expected, tuple):
        return list(policy.expected)
    if policy.weights is not None:
        return list(policy.weights)
    return [1.0 / nout] * nout


def expected_fanout(policy: ControlPolicy) -> float:
    if isinstance(policy.expected, (int, float)):
        return float(policy.expected)
    if policy.poisson_lam is not None:
        cdf = truncated_poisson_cdf(policy.poisson_lam, policy.cap)
        pmf = [cdf[0]] + [cdf[k] - cdf[k - 1] for k in range(1, len(cdf))]
        return sum(k * p for k, p in enumerate(pmf))
    return 1.0


def expected_visits(graph: OwgGraph) -> dict[str, float]:
    """Expected number of packets reaching each node per injected packet."""
    visits = {nid: 0.0 for nid in graph.node}
    visits[graph.source_node_id] = 1.0
    pairs = graph.pairs()
    collapse_of = {c: e for e, c in pairs.items() if graph.node[e].kind == NodeKind.EXPAND}
    for nid in graph.topological_order():
        node = graph.node[nid]
        outs = graph.successors(nid)
        if node.kind == NodeKind.COLLAPSE:
            # one output per parent, including parents that skipped the scope
            visits[nid] = visits[collapse_of[nid]]
        flow = visits[nid]
        if node.kind == NodeKind.ROUTE:
            for succ, p in zip(outs, expected_branch_probs(node.control_policy, len(outs))):
                visits[succ] += flow * p
        elif node.kind == NodeKind.EXPAND:
            visits[outs[0]] += flow * expected_fanout(node.control_policy)
        else:
            for succ in outs:
                if graph.node[succ].kind != NodeKind.COLLAPSE:
                    visits[succ] += flow
    return visits


# -- timing-free reference semantics ---------------------------------------

def walk_packet(graph: OwgGraph, packet: DataPacket, seed: int) -> list[DataPacket]:
    """Push one packet through pure graph semantics and return what reaches
    the sink.  Used as an oracle for pairing soundness and conservation."""
    pairs = graph.pairs()
    pending: deque = deque([(graph.next_node(graph.source_node_id), packet)])
    collapse_seen: dict = {}
    out = []
    while pending:
        nid, pkt = pending.popleft()
        node = graph.node[nid]
        if node.kind == NodeKind.SINK:
            out.append(pkt)
        elif node.kind == NodeKind.TASK:
            pending.append((graph.next_node(nid), pkt))
        elif node.kind == NodeKind.ROUTE:
            idx = route_decide(node.control_policy, pkt, packet_rng(seed, nid, pkt))
            pending.append((graph.successors(nid)[idx], pkt))
        elif node.kind == NodeKind.MERGE:
            pending.append((graph.next_node(nid), pkt))
        elif node.kind == NodeKind.EXPAND:
            n = expand_count(node.control_policy, pkt, packet_rng(seed, nid, pkt))
            if n == 0:
                pending.append((graph.next_node(pairs[nid]), pkt))
            else:
                for i in range(n):
                    child = DataPacket(pkt.stream_id, pkt.seq, pkt.lineage + ((nid, i, n),),
                                       pkt.size_bytes, pkt.meta)
                    pending.append((graph.next_node(nid), child))
        elif node.kind == NodeKind.COLLAPSE:
            *rest, (exp_id, _, count) = pkt.lineage
            key = (nid, pkt.stream_id, pkt.seq, tuple(rest))
            collapse_seen[key] = collapse_seen.get(key, 0) + 1
            if collapse_seen[key] == count:
                del collapse_seen[key]
                pending.append((graph.next_node(nid),
                                DataPacket(pkt.stream_id, pkt.seq, tuple(rest), pkt.size_bytes, pkt.meta)))
        else:
            raise WorkloadError(f"packet reached unexpected node {nid}")
    return out
