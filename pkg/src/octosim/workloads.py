"""Synthetic benchmark workflows and their input streams.

A benchmark is a main path of Task Block chains.  ``expand_count`` chains
each sit inside their own Expand/Collapse scope, and every condition
is a two-way Route/Merge pair around one chain whose second branch bypasses
it.  Cutting at the Control Blocks therefore yields one sub-OWG per chain.

Input streams carry per-packet meta tags that drive the Control Blocks:
``x<i>`` is the fanout of Expand ``i`` and ``c<j>`` selects the branch of
condition ``j``.  Video-like inputs hold tags constant over segments of
consecutive frames; image-like inputs draw them independently per packet.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .owg import (
    ConfigError, ControlPolicy, DataPacket, ExecTimeModel, NodeKind, OwgGraph, OwgNode,
    TaskFlowEdge, TaskProfile, make_meta, truncated_poisson_cdf,
)
from .partition import build_plan
from .rng import make_rng, stream_key

TRACE_MAGIC = b"OCTR"
TRACE_VERSION = 1


class SpecError(ValueError):
    """Inconsistent benchmark specification."""


class TraceFormatError(ValueError):
    """Malformed schedule trace file."""


# packets/cycle; TB base cycles are requirement / rate, i.e. 4000 per TBU,
# several reconfiguration latencies long
DEFAULT_TARGET_RATE = 2.5e-4


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    expand_count: int
    condition_count: int
    sub_owg_count: int
    task_block_count: int
    cluster_scale: int
    input_kind: str = "video"
    stream_count: int = 4
    packets_per_stream: int = 100
    # per-chain TBU requirement of each TB; None derives a default split
    chain_requirements: tuple[tuple[int, ...], ...] | None = None
    target_rate: float = DEFAULT_TARGET_RATE
    packet_bytes: int = 16384
    # fanout of every Expand: truncated Poisson(lam, cap)
    fanout_lam: float = 2.0
    fanout_cap: int = 8
    # probability that a condition takes the compute branch
    route_weight: float = 0.5
    # video-like inputs: tags stay fixed for this many consecutive frames
    segment_length: int = 32
    # TB indices (global, in path order) with a phased execution-time trace
    dynamic_tbs: tuple[int, ...] = ()
    phase_high: float = 3.0
    phase_fraction: float = 0.25
    phase_period: int = 64
    # injection: cycles between packets (0 = everything available at cycle 0)
    inject_interval: int = 0
    bursty: bool = False
    burst_length: int = 32

    def check(self) -> None:
        if self.sub_owg_count < 1 or self.task_block_count < self.sub_owg_count:
            raise SpecError(f"{self.name}: need at least one TB per sub-OWG "
                            f"({self.task_block_count} TBs for {self.sub_owg_count} sub-OWGs)")
        if not 0 <= self.expand_count <= self.sub_owg_count:
            raise SpecError(f"{self.name}: expand_count must lie in [0, sub_owg_count]")
        if self.condition_count < 0 or self.condition_count > self.sub_owg_count:
            raise SpecError(f"{self.name}: condition_count must lie in [0, sub_owg_count]")
        if self.input_kind not in ("video", "image"):
            raise SpecError(f"{self.name}: input_kind must be 'video' or 'image'")
        if not 0.0 <= self.route_weight <= 1.0:
            raise SpecError(f"{self.name}: route_weight must lie in [0, 1]")
        if self.fanout_cap < 1 or self.fanout_lam < 0:
            raise SpecError(f"{self.name}: bad fanout parameters")
        reqs = self.requirements()
        if len(reqs) != self.sub_owg_count or sum(map(len, reqs)) != self.task_block_count:
            raise SpecError(f"{self.name}: chain_requirements do not match the TB/sub-OWG counts")
        if any(r < 1 for c in reqs for r in c):
            raise SpecError(f"{self.name}: TBU requirements must be >= 1")
        if max(sum(c) for c in reqs) != self.cluster_scale:
            raise SpecError(f"{self.name}: the heaviest chain must need exactly cluster_scale TBUs")
        if not 0 < self.phase_fraction < 1 and self.dynamic_tbs:
            raise SpecError(f"{self.name}: phase_fraction must lie in (0, 1)")
        for i in self.dynamic_tbs:
            if not 0 <= i < self.task_block_count:
                raise SpecError(f"{self.name}: dynamic TB index {i} out of range")
        wrapped = set(self.expanded_chains()) | set(self.condition_chains())
        for i in range(self.sub_owg_count - 1):
            if i not in wrapped and i + 1 not in wrapped:
                raise SpecError(f"{self.name}: chains {i} and {i + 1} would fuse into one sub-OWG; "
                                f"{self.expand_count} Expand and {self.condition_count} condition "
                                f"scopes cannot separate {self.sub_owg_count} chains")

    def expanded_chains(self) -> frozenset[int]:
        """Chains wrapped in Expand scopes.  Every other chain counted from
        the end comes first so that adjacent chains stay separated by a
        Control Block; any remaining scopes wrap the rest, again from the end."""
        S = self.sub_owg_count
        order = [i for i in range(S - 1, -1, -1) if (S - 1 - i) % 2 == 0]
        order += [i for i in range(S - 1, -1, -1) if (S - 1 - i) % 2 == 1]
        return frozenset(order[:self.expand_count])

    def condition_chains(self) -> dict[int, int]:
        return {(2 + j) % self.sub_owg_count: j for j in range(self.condition_count)}

    def requirements(self) -> tuple[tuple[int, ...], ...]:
        if self.chain_requirements is not None:
            return tuple(tuple(c) for c in self.chain_requirements)
        # spread TBs over chains (longer chains first), then give the first
        # chain enough requirement to reach the cluster scale
        n, s = self.task_block_count, self.sub_owg_count
        lens = [n // s + (1 if i < n % s else 0) for i in range(s)]
        chains = [[1] * k for k in lens]
        extra = self.cluster_scale - lens[0]
        if extra < 0:
            raise SpecError(f"{self.name}: first chain has more TBs than cluster_scale")
        j = 0
        while extra > 0:
            chains[0][j % lens[0]] += 1
            extra -= 1
            j += 1
        return tuple(tuple(c) for c in chains)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chain_requirements"] = [list(c) for c in self.requirements()]
        d["dynamic_tbs"] = list(self.dynamic_tbs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> BenchmarkSpec:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown benchmark keys: {sorted(unknown)}")
        kw = dict(d)
        if kw.get("chain_requirements") is not None:
            kw["chain_requirements"] = tuple(tuple(c) for c in kw["chain_requirements"])
        if "dynamic_tbs" in kw:
            kw["dynamic_tbs"] = tuple(kw["dynamic_tbs"])
        return cls(**kw)


# Structural counts follow the published benchmark table; the remaining
# knobs are the defaults used by the acceptance experiments.
PRESETS: dict[str, BenchmarkSpec] = {
    "ER": BenchmarkSpec("ER", 4, 1, 4, 10, 8, "video",
                        chain_requirements=((3, 3, 2), (2, 2, 2), (2, 2), (3, 1)),
                        dynamic_tbs=(1, 6)),
    "DPSR": BenchmarkSpec("DPSR", 4, 1, 4, 9, 4, "video",
                          chain_requirements=((2, 1, 1), (1, 1), (2, 1), (1, 1)),
                          dynamic_tbs=(0, 5)),
    "SFR": BenchmarkSpec("SFR", 4, 0, 4, 7, 8, "video",
                         chain_requirements=((5, 3), (2, 2), (4,), (3, 2)),
                         dynamic_tbs=(0, 4)),
    "CMR": BenchmarkSpec("CMR", 4, 1, 5, 10, 8, "video",
                         chain_requirements=((4, 4), (2, 2), (3, 2), (2, 1), (2, 2)),
                         dynamic_tbs=(2, 5)),
    "OSVOS": BenchmarkSpec("OSVOS", 2, 0, 4, 6, 4, "image", stream_count=8, packets_per_stream=50,
                           chain_requirements=((2, 2), (1, 1), (2,), (3,)),
                           dynamic_tbs=(1, 4)),
    "OCR": BenchmarkSpec("OCR", 2, 0, 3, 10, 4, "image", stream_count=8, packets_per_stream=50,
                         chain_requirements=((1, 1, 1, 1), (1, 1, 1), (2, 1, 1)),
                         dynamic_tbs=(2, 8)),
}


def preset(name: str, **overrides) -> BenchmarkSpec:
    try:
        spec = PRESETS[name.upper()]
    except KeyError:
        raise SpecError(f"unknown benchmark {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(spec, **overrides) if overrides else spec


def load_spec(path) -> BenchmarkSpec:
    """Read a benchmark spec file: JSON with either full fields or
    ``{"preset": NAME, ...overrides}``."""
    with open(path) as f:
        d = json.load(f)
    if "preset" in d:
        base = preset(d.pop("preset"))
        return BenchmarkSpec.from_dict({**base.to_dict(), **d})
    return BenchmarkSpec.from_dict(d)


# ----------------------------------------------------------------------
# graph generation

def truncated_poisson_mean(lam: float, cap: int) -> float:
    cdf = truncated_poisson_cdf(lam, cap)
    prev, mean = 0.0, 0.0
    for k, c in enumerate(cdf):
        mean += k * (c - prev)
        prev = c
    return mean


def phased_trace(base: int, high: float, fraction: float, period: int) -> tuple[int, ...]:
    """Execution-time trace with a high phase of ``fraction * period``
    packets at ``high`` times the mean followed by a low phase; the low
    factor is chosen so the trace mean stays close to ``base``."""
    n_hi = max(1, round(fraction * period))
    n_lo = period - n_hi
    if n_lo < 1:
        raise SpecError("phase period too short for a low phase")
    low = (period - high * n_hi) / n_lo
    if low <= 0:
        raise SpecError(f"phase_high {high} with fraction {fraction} leaves no room for a low phase")
    hi_c = max(1, round(base * high))
    lo_c = max(1, round(base * low))
    return (hi_c,) * n_hi + (lo_c,) * n_lo


def _calibrated_base(req: int, mean_factor: float, rate: float) -> int:
    # largest base whose expected cycles still need exactly ``req`` TBUs
    base = math.floor(req / (mean_factor * rate))
    while base > 1 and math.ceil(base * mean_factor * rate - 1e-9) > req:
        base -= 1
    return base


def generate_benchmark(spec: BenchmarkSpec, seed: int = 0):
    """Build the benchmark graph.  Returns (graph, profiles)."""
    spec.check()
    reqs = spec.requirements()
    rng = make_rng(seed, stream_key("benchmark", spec.name))
    nodes = [OwgNode("source", NodeKind.SOURCE)]
    edges = []
    prev = "source"

    def link(a, b):
        edges.append(TaskFlowEdge(f"e{len(edges)}", a, b))

    expanded = spec.expanded_chains()
    cond_of = spec.condition_chains()
    fanout_mean = truncated_poisson_mean(spec.fanout_lam, spec.fanout_cap)
    tb_index = 0
    for ci, chain in enumerate(reqs):
        if ci in expanded:
            x = f"expand{ci}"
            nodes.append(OwgNode(x, NodeKind.EXPAND, control_policy=ControlPolicy(
                tag=f"x{ci}", cap=spec.fanout_cap, expected=fanout_mean)))
            link(prev, x)
            prev = x
        if ci in cond_of:
            j = cond_of[ci]
            r = f"route{j}"
            w = spec.route_weight
            nodes.append(OwgNode(r, NodeKind.ROUTE, control_policy=ControlPolicy(
                tag=f"c{j}", tag_map={1: 0, 0: 1}, expected=(w, 1.0 - w))))
            link(prev, r)
            prev = r
        for req in chain:
            tb = f"tb{tb_index}"
            if tb_index in spec.dynamic_tbs:
                base = _calibrated_base(req, 1.0, spec.target_rate)
                trace = phased_trace(base, spec.phase_high, spec.phase_fraction, spec.phase_period)
                # re-calibrate on the realised trace mean
                mean = sum(trace) / len(trace)
                if math.ceil(mean * spec.target_rate - 1e-9) != req:
                    scale = _calibrated_base(req, 1.0, spec.target_rate) / mean
                    trace = tuple(max(1, int(c * scale)) for c in trace)
                dyn = ExecTimeModel.from_trace(trace)
            else:
                # small deterministic jitter so TBs are not all identical
                jitter = 1.0 - 0.1 * float(rng.random())
                base = max(1, int(_calibrated_base(req, 1.0, spec.target_rate) * jitter))
                if math.ceil(base * spec.target_rate - 1e-9) != req:
                    base = _calibrated_base(req, 1.0, spec.target_rate)
                dyn = ExecTimeModel.constant()
            nodes.append(OwgNode(tb, NodeKind.TASK, task_profile=TaskProfile(
                base, dyn, req, spec.packet_bytes, tb_index)))
            link(prev, tb)
            prev = tb
            tb_index += 1
        if ci in cond_of:
            j = cond_of[ci]
            m = f"merge{j}"
            nodes.append(OwgNode(m, NodeKind.MERGE))
            link(prev, m)
            link(f"route{j}", m)
            prev = m
        if ci in expanded:
            c = f"collapse{ci}"
            nodes.append(OwgNode(c, NodeKind.COLLAPSE))
            link(prev, c)
            prev = c
    nodes.append(OwgNode("sink", NodeKind.SINK))
    link(prev, "sink")
    graph = OwgGraph(nodes, edges, "source", "sink")
    return graph, graph.profiles()


def structure_counts(graph: OwgGraph, plan=None) -> dict:
    kinds = [n.kind for n in graph.nodes]
    plan = plan or build_plan(graph, target_rate=DEFAULT_TARGET_RATE)
    return {
        "expand": kinds.count(NodeKind.EXPAND),
        "condition": kinds.count(NodeKind.ROUTE),
        "sub_owg": len(plan.sub_owgs),
        "task_block": kinds.count(NodeKind.TASK),
        "cluster_scale": plan.cluster_size,
    }


# ----------------------------------------------------------------------
# input generation

def fanout_tags(lam: float, cap: int, n: int, seed: int) -> list[int]:
    """``n`` fanout draws from a Poisson(lam) truncated at ``cap``
    (inverse-CDF on the seeded sequential generator)."""
    cdf = np.asarray(truncated_poisson_cdf(lam, cap))
    u = make_rng(seed, stream_key("fanout")).random(n)
    return [int(min(np.searchsorted(cdf, x, side="right"), cap)) for x in u]


def generate_input(spec: BenchmarkSpec, seed: int = 0) -> list[tuple[int, DataPacket]]:
    """Deterministic injection schedule: a list of (cycle, packet)."""
    spec.check()
    S, P = spec.stream_count, spec.packets_per_stream
    expanded = sorted(spec.expanded_chains())
    cdf = np.asarray(truncated_poisson_cdf(spec.fanout_lam, spec.fanout_cap))
    per_stream = []
    for s in range(S):
        rng = make_rng(seed, stream_key("input", spec.name, s))
        seg = spec.segment_length if spec.input_kind == "video" else 1
        n_seg = -(-P // seg) if P else 0
        tags = {}
        for i in expanded:
            u = rng.random(n_seg)
            tags[f"x{i}"] = [int(min(np.searchsorted(cdf, x, side="right"), spec.fanout_cap)) for x in u]
        for j in range(spec.condition_count):
            tags[f"c{j}"] = [int(x < spec.route_weight) for x in rng.random(n_seg)]
        pkts = []
        for q in range(P):
            k = q // seg
            meta = make_meta({name: vals[k] for name, vals in tags.items()})
            pkts.append(DataPacket(s, q, (), spec.packet_bytes, meta))
        per_stream.append(pkts)

    sched = []
    if spec.bursty:
        # streams take turns delivering bursts of back-to-back packets
        t = 0
        pos = [0] * S
        gap = spec.inject_interval * spec.burst_length
        while any(pos[s] < P for s in range(S)):
            for s in range(S):
                for _ in range(spec.burst_length):
                    if pos[s] < P:
                        sched.append((t, per_stream[s][pos[s]]))
                        pos[s] += 1
                t += gap
    else:
        i = 0
        for q in range(P):
            for s in range(S):
                sched.append((i * spec.inject_interval, per_stream[s][q]))
                i += 1
    sched.sort(key=lambda x: x[0])
    return sched


def schedule_hash(schedule) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(encode_schedule(schedule))
    return h.hexdigest()


# ----------------------------------------------------------------------
# trace files
#
# Layout (all little-endian):
#   header  : magic "OCTR" (4 bytes), version u16, record count u32
#   record  : cycle u64, stream u32, seq u32, size u32, lineage count u8,
#             meta count u8,
#             lineage entries: id length u8, id bytes (utf-8), index u16, count u16
#             meta entries:    key length u8, key bytes (utf-8), value i64

_HDR = struct.Struct("<4sHI")
_REC = struct.Struct("<QIIIBB")
_LIN = struct.Struct("<HH")
_VAL = struct.Struct("<q")


def encode_schedule(schedule) -> bytes:
    out = [_HDR.pack(TRACE_MAGIC, TRACE_VERSION, len(schedule))]
    for cyc, p in schedule:
        out.append(_REC.pack(cyc, p.stream_id, p.seq, p.size_bytes, len(p.lineage), len(p.meta)))
        for nid, idx, cnt in p.lineage:
            b = nid.encode()
            out.append(bytes([len(b)]) + b + _LIN.pack(idx, cnt))
        for k, v in p.meta:
            b = k.encode()
            out.append(bytes([len(b)]) + b + _VAL.pack(int(v)))
    return b"".join(out)


def decode_schedule(data: bytes) -> list[tuple[int, DataPacket]]:
    def need(off, n, what):
        if off + n > len(data):
            raise TraceFormatError(f"truncated {what} at offset {off}")

    need(0, _HDR.size, "header")
    magic, version, count = _HDR.unpack_from(data, 0)
    if magic != TRACE_MAGIC:
        raise TraceFormatError(f"bad magic {magic!r} at offset 0")
    if version != TRACE_VERSION:
        raise TraceFormatError(f"unsupported trace version {version} at offset 4")
    off = _HDR.size
    out = []
    for _ in range(count):
        need(off, _REC.size, "record")
        cyc, sid, seq, size, nlin, nmeta = _REC.unpack_from(data, off)
        off += _REC.size
        lineage = []
        for _ in range(nlin):
            need(off, 1, "lineage id length")
            n = data[off]
            need(off + 1, n + _LIN.size, "lineage entry")
            nid = data[off + 1:off + 1 + n].decode()
            idx, cnt = _LIN.unpack_from(data, off + 1 + n)
            lineage.append((nid, idx, cnt))
            off += 1 + n + _LIN.size
        meta = []
        for _ in range(nmeta):
            need(off, 1, "meta key length")
            n = data[off]
            need(off + 1, n + _VAL.size, "meta entry")
            key = data[off + 1:off + 1 + n].decode()
            (val,) = _VAL.unpack_from(data, off + 1 + n)
            meta.append((key, val))
            off += 1 + n + _VAL.size
        out.append((cyc, DataPacket(sid, seq, tuple(lineage), size, tuple(meta))))
    if off != len(data):
        raise TraceFormatError(f"trailing bytes at offset {off}")
    return out


def write_trace(path, schedule) -> None:
    with open(path, "wb") as f:
        f.write(encode_schedule(schedule))


def read_trace(path) -> list[tuple[int, DataPacket]]:
    with open(path, "rb") as f:
        return decode_schedule(f.read())


def chain_workload(cycles, n_packets: int, packet_bytes: int = 16384, traces=None):
    """A single sub-OWG chain ``source -> tb0 -> ... -> sink``.

    ``cycles`` gives each TB's base cycles; ``traces`` optionally maps a TB
    index to an explicit per-packet cycle trace.  Returns (graph, schedule)
    with every packet available at cycle 0.
    """
    traces = traces or {}
    nodes = [OwgNode("source", NodeKind.SOURCE)]
    edges = []
    prev = "source"
    for i, base in enumerate(cycles):
        dyn = ExecTimeModel.from_trace(traces[i]) if i in traces else ExecTimeModel.constant()
        nodes.append(OwgNode(f"tb{i}", NodeKind.TASK, task_profile=TaskProfile(
            int(base), dyn, 1, packet_bytes, i)))
        edges.append(TaskFlowEdge(f"e{i}", prev, f"tb{i}"))
        prev = f"tb{i}"
    nodes.append(OwgNode("sink", NodeKind.SINK))
    edges.append(TaskFlowEdge(f"e{len(cycles)}", prev, "sink"))
    graph = OwgGraph(nodes, edges, "source", "sink")
    sched = [(0, DataPacket(0, q, (), packet_bytes)) for q in range(n_packets)]
    return graph, sched
