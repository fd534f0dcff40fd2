"""Cycle-level model of the Octopus fabric.

One call to :meth:`Fabric.step` advances exactly one cycle in a fixed
sub-phase order:

1. deliver due network events (control messages, data-transfer arrivals,
   source injections);
2. CB engines: each (cluster, Control Block) engine handles at most one
   packet;
3. TBUs: (a) finish executions/reconfigurations and retry stalled outputs,
   (b) dispatch queued packets or pending reconfigurations onto idle TBUs;
4. scheduler hooks (adaptive TBU decisions, cluster triggers, diffusive or
   reactive balancing);
5. start data transfers requested during the cycle.

Unit counters are phase-accounted: a TBU records when it entered its current
phase and closes the interval when it leaves, so counters are exact for
every cycle whether or not the cycle was stepped explicitly.

``Fabric.run`` skips cycles in which provably nothing can happen (a cycle with
no state change is followed by identical cycles until the next timer fires).
``reference=True`` disables skipping and every timer shortcut: all TBUs,
clusters and CB engines are visited on every cycle.  The two modes must agree
bit for bit.
"""

from __future__ import annotations

import heapq
import struct
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

from ..owg import (
    ConfigError, DataPacket, NodeKind, OwgGraph, WorkloadError, expand_count, expected_visits,
    route_decide, sample_exec_cycles,
)
from ..partition import ClusterPlan
from ..rng import packet_rng
from ..schedulers import (
    DIRECTIONS, INPUT_IDLE, OUTPUT_CONGESTED, SchedulerSuite, adaptive_tbu_on_signal,
    diffusive_exchange, proactive_select, reactive_central_rebalance, rebind_flows,
)
from .config import FabricConfig, tile_shape

IDLE, BUSY, STALL, RECONF = 0, 1, 2, 3
PHASE_NAMES = ("idle", "busy", "stall", "reconfig")

# trace event codes
EV_EXEC, EV_DONE, EV_RECONF, EV_RECONF_DONE, EV_STALL, EV_SIGNAL, EV_SWITCH, \
    EV_TRANSFER, EV_ASSIGN, EV_SINK, EV_ABORT = range(1, 12)
TRACE_RECORD = struct.Struct("<QIBQ")


class LivelockError(Exception):
    pass


class InvariantError(Exception):
    pass


@dataclass(order=True)
class ControlMessage:
    deliver_at: int
    seq: int
    kind: str = field(compare=False)
    src: tuple = field(compare=False)
    dst: tuple = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)


class Tbu:
    __slots__ = ("idx", "coord", "cluster", "config", "state", "end", "packet", "held",
                 "phase_start", "counters", "pending", "reconf_target", "signaled",
                 "status", "reconfig_count", "coalesced", "executed", "aborted")

    def __init__(self, idx, coord, cluster, config):
        self.idx = idx
        self.coord = coord
        self.cluster = cluster
        self.config = config
        self.state = IDLE
        self.end = -1
        self.packet = None
        self.held = None
        self.phase_start = 0
        self.counters = [0, 0, 0, 0]
        self.pending = None
        self.reconf_target = None
        self.signaled = False
        self.status = None
        self.reconfig_count = 0
        self.coalesced = 0
        self.executed = 0
        self.aborted = 0


class Queue:
    """A bounded FIFO banked in one CBU's scratchpad.  ``reserved`` holds
    bytes of transfers already on their way here."""

    __slots__ = ("items", "bytes", "host", "cap", "reserved")

    def __init__(self, host):
        self.items = deque()
        self.bytes = 0
        self.host = host
        self.cap = 0
        self.reserved = 0

    def free(self) -> int:
        return self.cap - self.bytes - self.reserved


class Cluster:
    def __init__(self, idx, origin, shape, members, cbus, die):
        self.idx = idx
        self.origin = origin
        self.shape = shape
        self.members = members
        self.cbus = cbus
        self.leader = cbus[0]
        self.die = die
        self.running = None
        self.homes: list[int] = []
        self.switch_epoch = 0
        self.tasks_since = 0
        self.switches = 0
        self.n_stalled = 0
        self.reconf_in_flight = 0
        self.assign: dict[int, str] = {}


class Fabric:
    """Octopus fabric state plus the cycle-stepping engine."""

    def __init__(self, config: FabricConfig, plan: ClusterPlan, graph: OwgGraph,
                 suite: SchedulerSuite = SchedulerSuite(), seed: int = 0,
                 reference: bool = False, debug: bool = False, trace: bool = False):
        config.check()
        self.config = config
        self.plan = plan
        self.graph = graph
        self.suite = suite
        self.seed = seed
        self.reference = reference
        self.debug = debug
        self.trace_enabled = trace
        self.trace: list[tuple] = []

        self.profiles = graph.profiles()
        self.pairs = graph.pairs()
        self.sub_of_tb = plan.sub_of_tb()
        self.subs = {s.id: s for s in plan.sub_owgs}
        self.pos_of_tb = {tb: i for s in plan.sub_owgs for i, tb in enumerate(s.task_blocks)}
        self.head_sub = {s.task_blocks[0]: s.id for s in plan.sub_owgs}
        self.downstream = {s.id: self._downstream_subs(graph, s.task_blocks[-1])
                           for s in plan.sub_owgs}
        self.tb_of_config = {p.config_id: tb for tb, p in self.profiles.items()}
        self.tb_index = {tb: i for i, tb in enumerate(graph.task_blocks())}
        topo = graph.topological_order()
        cb_nodes = [n for n in topo if graph.node[n].kind in
                    (NodeKind.ROUTE, NodeKind.MERGE, NodeKind.EXPAND, NodeKind.COLLAPSE)]
        self.cb_rank = {n: i for i, n in enumerate(cb_nodes)}
        self.next_of = {n.id: graph.next_node(n.id) for n in graph.nodes
                        if n.kind not in (NodeKind.SINK, NodeKind.ROUTE)}
        self.entry_node = graph.next_node(graph.source_node_id)

        self._build_layout()
        self._init_state()

    # ------------------------------------------------------------------
    # layout
    def _build_layout(self):
        cfg = self.config
        size = self.plan.cluster_size
        h, w = tile_shape(size, cfg.tbu_grid)
        R, C = cfg.total_tbu_grid
        self.shape = (h, w)
        self.cluster_grid = (R // h, C // w)
        self.tbus: list[Tbu] = []
        tbu_at = {}
        for r in range(R):
            for c in range(C):
                t = Tbu(len(self.tbus), (r, c), -1, None)
                tbu_at[(r, c)] = t.idx
                self.tbus.append(t)
        self.clusters: list[Cluster] = []
        self.cluster_at = {}
        n_cbu = 0
        self.cbu_coord = []
        # CBUs hosting queues: one per TBU position (top-left corner); the
        # extra CBU row/column of each die only relays traffic
        for cr in range(self.cluster_grid[0]):
            for cc in range(self.cluster_grid[1]):
                r0, c0 = cr * h, cc * w
                members = [tbu_at[(r0 + i, c0 + j)] for i in range(h) for j in range(w)]
                cbus = list(range(n_cbu, n_cbu + len(members)))
                for m in members:
                    self.cbu_coord.append(self.tbus[m].coord)
                n_cbu += len(members)
                die = (r0 // cfg.tbu_grid[0], c0 // cfg.tbu_grid[1])
                cl = Cluster(len(self.clusters), (r0, c0), (h, w), members, cbus, die)
                for m in members:
                    self.tbus[m].cluster = cl.idx
                self.cluster_at[(cr, cc)] = cl.idx
                self.clusters.append(cl)
        self.cbu_bytes = [0] * n_cbu
        self.neighbors = []
        for cr in range(self.cluster_grid[0]):
            for cc in range(self.cluster_grid[1]):
                nb = {}
                for d, (dr, dc) in zip(DIRECTIONS, ((-1, 0), (1, 0), (0, 1), (0, -1))):
                    k = (cr + dr, cc + dc)
                    if k in self.cluster_at:
                        nb[d] = self.cluster_at[k]
                self.neighbors.append(nb)

    def cluster_hops(self, a: int, b: int) -> int:
        (r1, c1), (r2, c2) = self.clusters[a].origin, self.clusters[b].origin
        return max(1, abs(r1 - r2) + abs(c1 - c2))

    def _leader_hops(self, cl: Cluster, tbu: Tbu) -> int:
        (r1, c1), (r2, c2) = cl.origin, tbu.coord
        return abs(r1 - r2) + abs(c1 - c2) + 1

    def _init_state(self):
        plan = self.plan
        nsub = len(plan.sub_owgs)
        ncl = len(self.clusters)
        self.static_homes = self._static_homes() if self.suite.cluster_policy != "ProactiveDiffusive" else None
        self.homes_of = {}
        if self.static_homes is not None:
            for c, subs in enumerate(self.static_homes):
                self.clusters[c].homes = subs
                for s in subs:
                    self.homes_of.setdefault(s, []).append(c)
        for cl in self.clusters:
            first = cl.homes[0] if cl.homes else 0
            cl.running = first
            cfgs = plan.configurations[first]
            for k, m in enumerate(cl.members):
                tb = self.tb_of_config[cfgs[k]]
                self.tbus[m].config = tb
                cl.assign[m] = tb
        self.queues: dict[tuple, Queue] = {}
        self.sub_bytes = [[0] * nsub for _ in range(ncl)]
        self.inbound = [[0] * nsub for _ in range(ncl)]
        self.inbox: dict[tuple, Queue] = {}
        for cl in self.clusters:
            n = len(cl.cbus)
            for s in plan.sub_owgs:
                for p in range(len(s.task_blocks)):
                    self.queues[(cl.idx, s.id, p)] = Queue(cl.cbus[(s.id + p) % n])
            for node, rank in self.cb_rank.items():
                self.inbox[(cl.idx, node)] = Queue(cl.cbus[rank % n])
        # each CBU's scratchpad is split evenly between the structures it hosts
        hosted: dict[int, int] = {}
        for q in (*self.queues.values(), *self.inbox.values()):
            hosted[q.host] = hosted.get(q.host, 0) + 1
        for q in (*self.queues.values(), *self.inbox.values()):
            q.cap = self.config.tf_queue_capacity_bytes // hosted[q.host]
        self.min_queue_cap = min(q.cap for q in (*self.queues.values(), *self.inbox.values()))
        biggest = max(p.packet_out_size for p in self.profiles.values())
        if biggest > self.min_queue_cap:
            raise ConfigError(f"a {biggest}-byte packet does not fit the smallest queue bank "
                              f"({self.min_queue_cap} bytes); raise tf_queue_capacity_bytes")
        self.active_inbox: set = set()
        self.collapse_table: dict = {}
        self.expand_progress: dict = {}
        self.collapse_weight = Fraction(0)

        self.now = 0
        self.tbu_heap: list = []
        self.net_heap: list = []
        self.msg_seq = 0
        self.port_free = [0] * ncl
        self.transfer_requests: list = []
        self.in_flight: dict[int, tuple] = {}
        self.signals: list = []
        self.dirty: set = set(range(ncl))
        self.dirty_next: set = set()
        self.stalled: set = set()
        self.changed = False
        self.phase = 0
        self.last_change = 0

        self.schedule: list = []
        self.sched_pos = 0
        self.source_pending: dict[int, deque] = {}
        self.n_injected = 0
        self.n_expected = 0
        self.sink_count = 0
        self.sink_times: list[int] = []
        self.short_phases: list[int] = []
        self.first_sub_rr = 0
        self._rr: dict = {}

        self.counters = {
            "diffusive_bytes": 0, "reactive_bytes": 0, "rebind_bytes": 0, "pipeline_bytes": 0,
            "cluster_switches": 0, "adaptive_switches": 0, "adaptive_nochange": 0,
            "control_messages": 0, "coalesced_reconfigs": 0, "diffusion_rounds": 0,
            "reactive_events": 0, "cb_packets": 0, "aborted_packets": 0,
        }
        self.epoch_busy: list[list[int]] = [[] for _ in self.clusters]
        self.switch_log: list[tuple] = []
        self.reconfig_log: list[tuple] = []

    def _static_homes(self):
        """Fixed sub-OWG -> cluster mapping of the static baseline: clusters
        are shared out in proportion to expected work, largest remainder,
        every sub-OWG at least one cluster, contiguous along a snake order."""
        visits = expected_visits(self.graph)
        work = {}
        for s in self.plan.sub_owgs:
            per_pkt = sum(self.profiles[tb].expected_cycles() for tb in s.task_blocks)
            work[s.id] = visits[s.task_blocks[0]] * per_pkt / self.plan.cluster_size
        subs = [s.id for s in self.plan.sub_owgs]
        ncl = len(self.clusters)
        order = []
        R, C = self.cluster_grid
        for r in range(R):
            cols = range(C) if r % 2 == 0 else range(C - 1, -1, -1)
            order.extend(self.cluster_at[(r, c)] for c in cols)
        homes = [[] for _ in range(ncl)]
        if ncl >= len(subs):
            total = sum(work.values()) or 1.0
            spare = ncl - len(subs)
            quota = {s: work[s] / total * spare for s in subs}
            count = {s: 1 + int(quota[s]) for s in subs}
            left = ncl - sum(count.values())
            for s in sorted(subs, key=lambda s: (-(quota[s] - int(quota[s])), s))[:left]:
                count[s] += 1
            i = 0
            for s in subs:
                for _ in range(count[s]):
                    homes[order[i]].append(s)
                    i += 1
        else:
            load = [0.0] * ncl
            for s in sorted(subs, key=lambda s: (-work[s], s)):
                k = min(range(ncl), key=lambda c: (load[order[c]], c))
                homes[order[k]].append(s)
                load[order[k]] += work[s]
            for hl in homes:
                hl.sort()
        return homes

    # ------------------------------------------------------------------
    # workload
    def attach(self, schedule) -> None:
        """Attach an injection schedule: iterable of (cycle, DataPacket)."""
        self.schedule = sorted(schedule, key=lambda x: x[0])
        big = max((p.size_bytes for _, p in self.schedule), default=0)
        if big > self.min_queue_cap:
            raise ConfigError(f"a {big}-byte input packet does not fit the smallest queue bank "
                              f"({self.min_queue_cap} bytes); raise tf_queue_capacity_bytes")
        self.sched_pos = 0
        self.n_expected += len(self.schedule)

    def inject(self, packet: DataPacket, cluster: int | None = None) -> None:
        """Place a packet directly into its entry structure (no port limit)."""
        c = self._entry_cluster(packet, cluster)
        self.n_expected += 1
        self.n_injected += 1
        if not self._deliver([packet], self.entry_node, c):
            raise InvariantError("preloaded packet does not fit the queue capacity")

    def _downstream_subs(self, graph, node) -> frozenset:
        """Sub-OWGs reachable from ``node`` through the graph."""
        seen, stack, out = set(), list(graph.successors(node)), set()
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            if n in self.head_sub:
                out.add(self.head_sub[n])
            stack.extend(graph.successors(n))
        return frozenset(out)

    def _entry_cluster(self, packet, hint=None):
        if hint is not None:
            return hint
        ncl = len(self.clusters)
        if self.static_homes is not None and self.graph.node[self.entry_node].kind == NodeKind.TASK:
            homes = self.homes_of[self.head_sub[self.entry_node]]
            k = packet.stream_id if self.config.injection_mode == "stream" else self.first_sub_rr
            self.first_sub_rr += 1
            return homes[k % len(homes)]
        if self.config.injection_mode == "stream":
            return packet.stream_id % ncl
        c = self.first_sub_rr % ncl
        self.first_sub_rr += 1
        return c

    # ------------------------------------------------------------------
    # bookkeeping helpers
    def _mark(self, cluster: int):
        (self.dirty if self.phase <= 3 else self.dirty_next).add(cluster)

    def _set_phase(self, t: Tbu, phase: int, at: int):
        t.counters[t.state] += at - t.phase_start
        if t.state == BUSY:
            self._epoch_add(t.cluster, t.phase_start, at)
        t.state = phase
        t.phase_start = at

    def _epoch_add(self, cluster, start, end):
        E = self.config.epoch_cycles
        bins = self.epoch_busy[cluster]
        while start < end:
            e = start // E
            stop = min(end, (e + 1) * E)
            while len(bins) <= e:
                bins.append(0)
            bins[e] += stop - start
            start = stop

    def _log(self, unit, event, payload=0):
        if self.trace_enabled:
            self.trace.append((self.now, unit, event, payload))

    def _send(self, kind, src, dst, payload, hops, tbu_dst=None):
        lat = self.config.control_hop_latency * max(1, hops)
        self.msg_seq += 1
        msg = ControlMessage(self.now + lat, self.msg_seq, kind, src, dst, payload)
        heapq.heappush(self.net_heap, (msg.deliver_at, self.msg_seq, "msg", msg))
        self.counters["control_messages"] += 1
        self.changed = True

    def _push(self, q: Queue, pkt: DataPacket, reserved=False):
        q.items.append(pkt)
        q.bytes += pkt.size_bytes
        if reserved:
            q.reserved -= pkt.size_bytes
        else:
            self.cbu_bytes[q.host] += pkt.size_bytes

    def _queue_push(self, c, s, p, pkt, reserved=False):
        self._push(self.queues[(c, s, p)], pkt, reserved)
        self.sub_bytes[c][s] += pkt.size_bytes
        self._mark(c)
        self.changed = True
        self._wake_unstaffed(c, s, p)

    def _wake_unstaffed(self, c, s, p):
        """Queued work for a TB with no TBU re-arms the idle members'
        InputIdle signal so one of them can claim it."""
        if not self.suite.adaptive:
            return
        cl = self.clusters[c]
        if s != cl.running or self.subs[s].task_blocks[p] in cl.assign.values():
            return
        for m in cl.members:
            x = self.tbus[m]
            if x.state == IDLE and x.signaled:
                x.signaled = False
                self._mark(c)

    def _queue_pop(self, c, s, p, from_tail=False):
        q = self.queues[(c, s, p)]
        pkt = q.items.pop() if from_tail else q.items.popleft()
        q.bytes -= pkt.size_bytes
        self.cbu_bytes[q.host] -= pkt.size_bytes
        self.sub_bytes[c][s] -= pkt.size_bytes
        self.changed = True
        return pkt

    def _static_target(self, c: int, s: int) -> int:
        homes = self.homes_of[s]
        if c in homes:
            return c
        mine = self.static_homes[c]
        k = self.homes_of[mine[0]].index(c) if mine else c
        return homes[k % len(homes)]

    def _deliver(self, pkts, node, c, force=False, skip=False) -> bool:
        """Hand packets produced at cluster ``c`` to ``node``.  Returns False
        (and does nothing) when the destination lacks capacity."""
        kind = self.graph.node[node].kind
        if kind == NodeKind.SINK:
            for _ in pkts:
                self.sink_count += 1
                self.sink_times.append(self.now + 1)
                self._log(c, EV_SINK, self.sink_count)
            self.changed = True
            return True
        nbytes = sum(p.size_bytes for p in pkts)
        if kind == NodeKind.TASK:
            s = self.head_sub[node]
            dst = c if self.static_homes is None else self._static_target(c, s)
            q = self.queues[(dst, s, 0)]
            if not force and q.free() < nbytes:
                return False
            if dst == c:
                for p in pkts:
                    self._queue_push(c, s, 0, p)
            else:
                self.cbu_bytes[q.host] += nbytes
                q.reserved += nbytes
                self.inbound[dst][s] += nbytes
                self.transfer_requests.append((c, dst, s, list(pkts), "pipeline"))
                self.changed = True
            return True
        q = self.inbox[(c, node)]
        if not force and q.free() < nbytes:
            return False
        for p in pkts:
            q.items.append((self.now + 1, p, skip))
        q.bytes += nbytes
        self.cbu_bytes[q.host] += nbytes
        self.active_inbox.add((c, node))
        self.changed = True
        return True

    # ------------------------------------------------------------------
    # public single-shot operations
    def reconfigure_tbu(self, idx: int, tb: str) -> None:
        """Request TBU ``idx`` to switch to Task Block ``tb`` at its next
        packet boundary."""
        t = self.tbus[idx]
        if t.state == RECONF:
            if t.pending != tb:
                t.coalesced += 1
                self.counters["coalesced_reconfigs"] += 1
            t.pending = tb
        elif tb == t.config:
            t.pending = None
        else:
            t.pending = tb
        self.clusters[t.cluster].assign[idx] = tb
        self._mark(t.cluster)
        self.changed = True

    def transfer_load(self, src: int, dst: int, sub: int, nbytes: int, kind: str = "diffusive") -> int:
        """Move whole packets (from the tail of ``src``'s input queue of
        ``sub``) totalling at most ``nbytes``, truncated to the free capacity
        at ``dst``.  Returns the bytes actually scheduled."""
        if nbytes <= 0 or src == dst:
            return 0
        q = self.queues[(src, sub, 0)]
        dq = self.queues[(dst, sub, 0)]
        budget = min(nbytes, dq.free())
        moved = []
        total = 0
        while q.items and total + q.items[-1].size_bytes <= budget:
            pkt = self._queue_pop(src, sub, 0, from_tail=True)
            moved.append(pkt)
            total += pkt.size_bytes
        if not moved:
            return 0
        self.cbu_bytes[dq.host] += total
        dq.reserved += total
        self.inbound[dst][sub] += total
        self.transfer_requests.append((src, dst, sub, moved, kind))
        self.counters[f"{kind}_bytes"] += total
        self.changed = True
        return total

    def transfer_time(self, src: int, dst: int, nbytes: int) -> int:
        cfg = self.config
        bw = cfg.inter_die_bandwidth if self.clusters[src].die != self.clusters[dst].die else cfg.data_link_bandwidth
        return self.cluster_hops(src, dst) * cfg.data_hop_latency + -(-nbytes // bw)

    # ------------------------------------------------------------------
    # the cycle
    def step(self) -> bool:
        """Advance one cycle; returns whether any state changed."""
        t = self.now
        self.changed = False
        self.phase = 1
        self._phase_network(t)
        self.phase = 2
        self._phase_cb_engines(t)
        self.phase = 3
        self._phase_tbu_finish(t)
        self._phase_dispatch(t)
        if self.short_phases:
            # one-cycle phases started by dispatch also end in this cycle
            units = [self.tbus[i] for i in sorted(self.short_phases)]
            self.short_phases = []
            self._finish_units(units, t)
        self.phase = 4
        self._phase_schedulers(t)
        self.phase = 5
        self._phase_transfers(t)
        self.phase = 0
        self.dirty = self.dirty_next
        self.dirty_next = set()
        if self.changed:
            self.last_change = t
        if self.debug:
            self.check_invariants(t + 1)
        self.now = t + 1
        return self.changed

    def _phase_network(self, t):
        heap = self.net_heap
        while heap and heap[0][0] <= t:
            _, _, kind, item = heapq.heappop(heap)
            self.changed = True
            if kind == "arrival":
                src, dst, sub, pkts, tkind = item
                for p in pkts:
                    self._queue_push(dst, sub, 0, p, reserved=True)
                self.inbound[dst][sub] -= sum(p.size_bytes for p in pkts)
            else:
                self._on_message(item)
        # source injection through the Task Flow Port
        sched = self.schedule
        while self.sched_pos < len(sched) and sched[self.sched_pos][0] <= t:
            pkt = sched[self.sched_pos][1]
            self.source_pending.setdefault(pkt.stream_id, deque()).append(pkt)
            self.sched_pos += 1
            self.changed = True
        if self.source_pending:
            budget = {}
            for sid in sorted(self.source_pending):
                dq = self.source_pending[sid]
                while dq:
                    pkt = dq[0]
                    c = self._peek_entry(pkt)
                    if budget.get(c, 0) >= self.config.injection_per_cycle:
                        break
                    if not self._deliver([pkt], self.entry_node, c):
                        break
                    self._commit_entry(pkt)
                    budget[c] = budget.get(c, 0) + 1
                    dq.popleft()
                    self.n_injected += 1
                if not dq:
                    del self.source_pending[sid]

    def _peek_entry(self, pkt):
        saved = self.first_sub_rr
        c = self._entry_cluster(pkt)
        self.first_sub_rr = saved
        return c

    def _commit_entry(self, pkt):
        self._entry_cluster(pkt)

    def _on_message(self, msg: ControlMessage):
        if msg.kind == "StatusReport":
            self.signals.append(msg)
        elif msg.kind in ("ConfigIndex", "ClusterReconfig"):
            t = self.tbus[msg.payload["tbu"]]
            cl = self.clusters[t.cluster]
            if msg.kind == "ClusterReconfig":
                cl.reconf_in_flight -= 1
            if msg.payload["epoch"] != cl.switch_epoch:
                return
            self.reconfigure_tbu(t.idx, msg.payload["tb"])

    def _phase_cb_engines(self, t):
        keys = sorted(self.inbox) if self.reference else sorted(self.active_inbox)
        for key in keys:
            q = self.inbox[key]
            if not q.items:
                continue
            ready, pkt, skip = q.items[0]
            if ready > t:
                continue
            c, node = key
            if self._run_cb(c, node, pkt, skip):
                q.items.popleft()
                q.bytes -= pkt.size_bytes
                self.cbu_bytes[q.host] -= pkt.size_bytes
                self.counters["cb_packets"] += 1
                self.changed = True
                if not q.items:
                    self.active_inbox.discard(key)

    def _run_cb(self, c, node, pkt, skip) -> bool:
        n = self.graph.node[node]
        kind = n.kind
        if kind == NodeKind.ROUTE:
            idx = route_decide(n.control_policy, pkt, packet_rng(self.seed, node, pkt))
            return self._deliver([pkt], self.graph.successors(node)[idx], c)
        if kind == NodeKind.MERGE:
            return self._deliver([pkt], self.next_of[node], c)
        if kind == NodeKind.EXPAND:
            # one child per cycle; the parent leaves the inbox with its last child
            done, cnt = self.expand_progress.get((c, node), (0, None))
            if cnt is None:
                cnt = expand_count(n.control_policy, pkt, packet_rng(self.seed, node, pkt))
            if cnt == 0:
                return self._deliver([pkt], self.pairs[node], c, skip=True)
            kid = DataPacket(pkt.stream_id, pkt.seq, pkt.lineage + ((node, done, cnt),),
                             pkt.size_bytes, pkt.meta)
            if not self._deliver([kid], self.next_of[node], c):
                return False
            if done + 1 < cnt:
                self.expand_progress[(c, node)] = (done + 1, cnt)
                return False
            self.expand_progress.pop((c, node), None)
            return True
        # collapse
        if skip:
            return self._deliver([pkt], self.next_of[node], c)
        *rest, (exp_id, _, cnt) = pkt.lineage
        key = (node, pkt.stream_id, pkt.seq, tuple(rest))
        got, size = self.collapse_table.get(key, (0, 0))
        got += 1
        size = max(size, pkt.size_bytes)
        if got < cnt:
            self.collapse_table[key] = (got, size)
            self.collapse_weight += pkt.weight
            return True
        parent = DataPacket(pkt.stream_id, pkt.seq, tuple(rest), size, pkt.meta)
        if not self._deliver([parent], self.next_of[node], c):
            return False
        self.collapse_table.pop(key, None)
        self.collapse_weight -= pkt.weight * (cnt - 1)
        return True

    def _phase_tbu_finish(self, t):
        if self.reference:
            heap = self.tbu_heap
            while heap and heap[0][0] <= t:
                heapq.heappop(heap)
            todo = [x for x in self.tbus if (x.state in (BUSY, RECONF) and x.end == t) or x.state == STALL]
        else:
            due = set()
            heap = self.tbu_heap
            while heap and heap[0][0] <= t:
                _, idx = heapq.heappop(heap)
                x = self.tbus[idx]
                if x.state in (BUSY, RECONF) and x.end == t:
                    due.add(idx)
            due.update(self.stalled)
            todo = [self.tbus[i] for i in sorted(due)]
        self._finish_units(todo, t)

    def _finish_units(self, todo, t):
        for x in todo:
            if x.state == RECONF:
                x.config = x.reconf_target
                x.reconf_target = None
                x.reconfig_count += 1
                self._set_phase(x, IDLE, t + 1)
                self.dirty_next.add(x.cluster)
                self._log(x.idx, EV_RECONF_DONE, self.tb_index[x.config])
                self.changed = True
            elif x.state == BUSY:
                x.executed += 1
                self.clusters[x.cluster].tasks_since += 1
                prof = self.profiles[x.config]
                done = x.packet
                x.held = DataPacket(done.stream_id, done.seq, done.lineage, prof.packet_out_size, done.meta)
                self._log(x.idx, EV_DONE, self.tb_index[x.config])
                self.changed = True
                if self._emit(x, t):
                    self._release_input(x)
                    self._set_phase(x, IDLE, t + 1)
                    self.dirty_next.add(x.cluster)
                else:
                    self._set_phase(x, STALL, t + 1)
                    self.stalled.add(x.idx)
                    self.clusters[x.cluster].n_stalled += 1
                    x.status = OUTPUT_CONGESTED
                    self._log(x.idx, EV_STALL)
                    self._signal(x, OUTPUT_CONGESTED)
            elif x.state == STALL:
                if self._emit(x, t):
                    self._release_input(x)
                elif x.pending is not None:
                    self._abort(x)
                if x.held is None:
                    x.packet = None
                    self._set_phase(x, IDLE, t + 1)
                    self.stalled.discard(x.idx)
                    self.clusters[x.cluster].n_stalled -= 1
                    self.dirty_next.add(x.cluster)
                    self.changed = True

    def _release_input(self, x: Tbu) -> None:
        q = self.queues[(x.cluster, self.sub_of_tb[x.config], self.pos_of_tb[x.config])]
        q.reserved -= x.packet.size_bytes
        self.cbu_bytes[q.host] -= x.packet.size_bytes
        x.packet = None

    def _abort(self, x: Tbu) -> bool:
        """Halt a stalled TBU that has been asked to reconfigure: drop its
        output and return the input packet to the head of its queue."""
        s, p = self.sub_of_tb[x.config], self.pos_of_tb[x.config]
        q = self.queues[(x.cluster, s, p)]
        pkt = x.packet
        q.reserved -= pkt.size_bytes
        q.items.appendleft(pkt)
        q.bytes += pkt.size_bytes
        self.sub_bytes[x.cluster][s] += pkt.size_bytes
        self._mark(x.cluster)
        self._wake_unstaffed(x.cluster, s, p)
        x.held = None
        x.aborted += 1
        self.counters["aborted_packets"] += 1
        self._log(x.idx, EV_ABORT, self.tb_index[x.config])
        return True

    def _emit(self, x: Tbu, t) -> bool:
        """Push the held output of TBU ``x`` downstream; False when full."""
        pkt = x.held
        tb = x.config
        nxt = self.next_of[tb]
        c = x.cluster
        if self.graph.node[nxt].kind == NodeKind.TASK and nxt not in self.head_sub:
            s = self.sub_of_tb[tb]
            p = self.pos_of_tb[nxt]
            q = self.queues[(c, s, p)]
            if q.free() < pkt.size_bytes:
                return False
            self._queue_push(c, s, p, pkt)
            x.held = None
            if (self.suite.adaptive and x.state == BUSY
                    and len(q.items) >= self.config.congestion_watermark_packets):
                x.status = OUTPUT_CONGESTED
                self._signal(x, OUTPUT_CONGESTED)
            return True
        if not self._deliver([pkt], nxt, c):
            return False
        x.held = None
        return True

    def _signal(self, x: Tbu, kind: str):
        if not self.suite.adaptive:
            return
        cl = self.clusters[x.cluster]
        if x.config is None or self.sub_of_tb[x.config] != cl.running or x.pending is not None:
            return
        self._log(x.idx, EV_SIGNAL, 0 if kind == INPUT_IDLE else 1)
        self._send("StatusReport", x.coord, x.coord,
                   {"tbu": x.idx, "signal": kind, "tb": x.config, "epoch": cl.switch_epoch}, 1)

    def _phase_dispatch(self, t):
        clusters = range(len(self.clusters)) if self.reference else sorted(self.dirty)
        for ci in clusters:
            cl = self.clusters[ci]
            ready: dict[str, list[Tbu]] = {}
            for m in cl.members:
                x = self.tbus[m]
                if x.state != IDLE or x.phase_start > t:
                    continue
                if x.pending is not None:
                    if x.pending == x.config:
                        x.pending = None
                    else:
                        x.reconf_target = x.pending
                        x.pending = None
                        x.signaled = False
                        self._set_phase(x, RECONF, t)
                        x.end = t + self.config.reconfig_latency - 1
                        heapq.heappush(self.tbu_heap, (x.end, x.idx))
                        if x.end == t:
                            self.short_phases.append(x.idx)
                        self._log(x.idx, EV_RECONF, self.tb_index[x.reconf_target])
                        self.reconfig_log.append((t, x.idx, x.reconf_target))
                        self.changed = True
                        continue
                if x.config is not None:
                    ready.setdefault(x.config, []).append(x)
            for tb in sorted(ready, key=lambda b: (self.sub_of_tb[b], self.pos_of_tb[b])):
                s, p = self.sub_of_tb[tb], self.pos_of_tb[tb]
                q = self.queues[(ci, s, p)]
                reps = ready[tb]
                if q.items:
                    last = self._rr.get((ci, tb), -1)
                    reps.sort(key=lambda x: (x.idx <= last, x.idx))
                    used = 0
                    for x in reps:
                        if not q.items:
                            break
                        pkt = self._queue_pop(ci, s, p)
                        # the slot stays reserved until the output commits
                        q.reserved += pkt.size_bytes
                        self.cbu_bytes[q.host] += pkt.size_bytes
                        cyc = sample_exec_cycles(self.profiles[tb], pkt, packet_rng(self.seed, tb, pkt))
                        x.packet = pkt
                        x.signaled = False
                        x.status = None
                        self._set_phase(x, BUSY, t)
                        x.end = t + cyc - 1
                        heapq.heappush(self.tbu_heap, (x.end, x.idx))
                        if x.end == t:
                            self.short_phases.append(x.idx)
                        self._rr[(ci, tb)] = x.idx
                        self._log(x.idx, EV_EXEC, self.tb_index[tb])
                        used += 1
                    reps = reps[used:]
                if self.suite.adaptive:
                    for x in reps:
                        if not x.signaled and s == cl.running:
                            x.signaled = True
                            x.status = INPUT_IDLE
                            self._signal(x, INPUT_IDLE)

    def _phase_schedulers(self, t):
        # adaptive TBU scheduler in the owning CBUs
        if self.signals:
            sigs, self.signals = self.signals, []
            for msg in sigs:
                self._adaptive_decide(msg)
        policy = self.suite.cluster_policy
        tick = (t + 1) % self.config.diffusion_period == 0
        if policy == "ProactiveDiffusive" and tick:
            self._diffuse()
        for cl in self.clusters:
            self._cluster_trigger(cl, tick and policy == "ProactiveDiffusive")
        if policy == "ReactiveCentral":
            self._reactive()

    def _adaptive_decide(self, msg):
        p = msg.payload
        x = self.tbus[p["tbu"]]
        cl = self.clusters[x.cluster]
        if p["epoch"] != cl.switch_epoch or x.config != p["tb"] or cl.assign.get(x.idx) != x.config:
            return
        s = self.sub_of_tb[x.config]
        chain = self.subs[s].task_blocks
        qlen = {tb: len(self.queues[(cl.idx, s, i)].items) for i, tb in enumerate(chain)}
        reps = {}
        for m in cl.members:
            reps[cl.assign[m]] = reps.get(cl.assign[m], 0) + 1
        target = adaptive_tbu_on_signal(p["signal"], x.config, chain, qlen, reps,
                                        self.config.hysteresis_packets)
        if target is None:
            self.counters["adaptive_nochange"] += 1
            return
        old = dict(cl.assign)
        cl.assign[x.idx] = target
        _, moved, _ = rebind_flows(old, cl.assign)
        self.counters["rebind_bytes"] += moved
        self.counters["adaptive_switches"] += 1
        self._log(x.idx, EV_ASSIGN, self.tb_index[target])
        pos = self.pos_of_tb[x.config]
        if self.queues[(cl.idx, s, pos)].items:
            self._wake_unstaffed(cl.idx, s, pos)
        self._send("ConfigIndex", x.coord, x.coord,
                   {"tbu": x.idx, "tb": target, "epoch": cl.switch_epoch}, 1)

    def _cluster_trigger(self, cl: Cluster, periodic: bool):
        policy = self.suite.cluster_policy
        cfg = self.config
        sb = self.sub_bytes[cl.idx]
        running = cl.running
        if policy == "ProactiveDiffusive":
            trig = (periodic or sb[running] == 0 or cl.n_stalled > 0
                    or cl.tasks_since >= cfg.proactive_task_threshold)
            cands = None
        else:
            if len(cl.homes) < 2:
                return
            trig = sb[running] == 0 or cl.n_stalled > 0
            cands = cl.homes
        if not trig or self._in_transition(cl):
            return
        busy = any(self.tbus[m].state == BUSY for m in cl.members)
        if sb[running] == 0 and busy and not (periodic or cl.n_stalled
                                              or cl.tasks_since >= cfg.proactive_task_threshold):
            # the last packets are still executing; their outputs may need
            # a downstream sub-OWG to run next
            return
        if cl.tasks_since >= cfg.proactive_task_threshold:
            cl.tasks_since = 0
            self.changed = True
        loads = {s: b for s, b in enumerate(sb)}
        if cl.n_stalled:
            # a blocked output only clears once a downstream sub-OWG drains
            down = [d for d in self.downstream[running] if sb[d] and (cands is None or d in cands)]
            if down:
                cands = down
            elif not busy:
                # every member is blocked: the running sub-OWG cannot progress
                loads[running] = 0
        new = proactive_select(loads, running, cands)
        if new is None:
            return
        self._switch_cluster(cl, new)

    def _in_transition(self, cl: Cluster) -> bool:
        """A previous switch is still being applied (stalled TBUs excepted:
        they may wait on the very switch that would free them)."""
        if cl.reconf_in_flight:
            return True
        for m in cl.members:
            x = self.tbus[m]
            if x.state == RECONF or (x.pending is not None and x.state != STALL):
                return True
        return False

    def _switch_cluster(self, cl: Cluster, new: int):
        cl.running = new
        cl.switch_epoch += 1
        cl.tasks_since = 0
        cl.switches += 1
        self.counters["cluster_switches"] += 1
        self.switch_log.append((self.now, cl.idx, new))
        self.dirty_next.add(cl.idx)
        self._log(cl.idx, EV_SWITCH, new)
        cfgs = self.plan.configurations[new]
        for k, m in enumerate(cl.members):
            tb = self.tb_of_config[cfgs[k]]
            cl.assign[m] = tb
            x = self.tbus[m]
            cl.reconf_in_flight += 1
            self._send("ClusterReconfig", cl.origin, x.coord,
                       {"tbu": m, "tb": tb, "epoch": cl.switch_epoch}, self._leader_hops(cl, x))
        self.changed = True

    def _diffuse(self):
        self.counters["diffusion_rounds"] += 1
        nsub = len(self.plan.sub_owgs)
        snap = [{s: self.queues[(c, s, 0)].bytes for s in range(nsub)} for c in range(len(self.clusters))]
        moves = []
        for c, nb in enumerate(self.neighbors):
            # probe + reply per neighbour
            self.counters["control_messages"] += 2 * len(nb)
            for sub, d, quantum in diffusive_exchange(snap[c], {k: snap[v] for k, v in nb.items()},
                                                      self.config.transfer_cap_bytes):
                moves.append((c, nb[d], sub, quantum))
        for src, dst, sub, quantum in moves:
            self.transfer_load(src, dst, sub, quantum, "diffusive")

    def _reactive(self):
        for s, homes in sorted(self.homes_of.items()):
            if len(homes) < 2:
                continue
            loads = {c: self.queues[(c, s, 0)].bytes + self.inbound[c][s] for c in homes}
            moves = reactive_central_rebalance(loads, self.config.reactive_threshold,
                                               self.config.reactive_floor_bytes)
            if moves:
                self.counters["reactive_events"] += 1
            for src, dst, amt in moves:
                self.transfer_load(src, dst, s, amt, "reactive")

    def _phase_transfers(self, t):
        reqs, self.transfer_requests = self.transfer_requests, []
        for src, dst, sub, pkts, kind in reqs:
            nbytes = sum(p.size_bytes for p in pkts)
            cfg = self.config
            bw = cfg.inter_die_bandwidth if self.clusters[src].die != self.clusters[dst].die else cfg.data_link_bandwidth
            serial = -(-nbytes // bw)
            start = max(t, self.port_free[src])
            self.port_free[src] = start + serial
            arrive = start + self.cluster_hops(src, dst) * cfg.data_hop_latency + serial
            if kind == "pipeline":
                self.counters["pipeline_bytes"] += nbytes
            self.msg_seq += 1
            heapq.heappush(self.net_heap, (arrive, self.msg_seq, "arrival", (src, dst, sub, pkts, kind)))
            self._log(src, EV_TRANSFER, nbytes)
            self.changed = True

    # ------------------------------------------------------------------
    # driving
    def drained(self) -> bool:
        return self.sink_count >= self.n_expected

    def next_timer(self):
        cands = []
        if self.net_heap:
            cands.append(self.net_heap[0][0])
        if self.tbu_heap:
            cands.append(self.tbu_heap[0][0])
        if self.sched_pos < len(self.schedule):
            cands.append(self.schedule[self.sched_pos][0])
        if self.suite.cluster_policy == "ProactiveDiffusive":
            P = self.config.diffusion_period
            cands.append((self.now // P + 1) * P - 1 if (self.now + 1) % P else self.now)
        return min(cands) if cands else None

    def run(self, max_cycles: int | None = None):
        """Run until drained or ``max_cycles``; returns total cycles."""
        window = self.config.livelock_window
        while not self.drained():
            if max_cycles is not None and self.now >= max_cycles:
                break
            changed = self.step()
            if not self.drained() and self.now - self.last_change > window:
                raise LivelockError(
                    f"no state change for {window} cycles at cycle {self.now} with "
                    f"{self.n_expected - self.sink_count} packets outstanding")
            if changed or self.reference:
                continue
            nxt = self.next_timer()
            if nxt is None:
                raise LivelockError(f"deadlock at cycle {self.now}: nothing scheduled, "
                                    f"{self.n_expected - self.sink_count} packets outstanding")
            if max_cycles is not None:
                nxt = min(nxt, max_cycles)
            if nxt - self.last_change > window + 1 and not self.drained():
                raise LivelockError(f"no state change for {window} cycles after cycle {self.last_change}")
            if nxt > self.now:
                self.now = nxt
        return self.now

    def flushed_counters(self, at=None):
        at = self.now if at is None else at
        out = []
        for x in self.tbus:
            c = list(x.counters)
            c[x.state] += max(0, at - x.phase_start)
            out.append(c)
        return out

    # ------------------------------------------------------------------
    # invariants
    def conservation_terms(self):
        w = {"sink": Fraction(self.sink_count), "queues": Fraction(0), "inbox": Fraction(0),
             "flight": Fraction(0), "tbu": Fraction(0), "collapse": self.collapse_weight,
             "source": Fraction(sum(len(d) for d in self.source_pending.values()))}
        for q in self.queues.values():
            for p in q.items:
                w["queues"] += p.weight
        for key, q in self.inbox.items():
            for _, p, _ in q.items:
                w["inbox"] += p.weight
            if key in self.expand_progress:
                done, cnt = self.expand_progress[key]
                w["inbox"] -= q.items[0][1].weight * Fraction(done, cnt)
        for _, _, kind, item in self.net_heap:
            if kind == "arrival":
                w["flight"] += sum(p.weight for p in item[3])
        for req in self.transfer_requests:
            w["flight"] += sum(p.weight for p in req[3])
        for x in self.tbus:
            if x.held is not None:
                w["tbu"] += x.held.weight
            elif x.packet is not None:
                w["tbu"] += x.packet.weight
        return w

    def check_invariants(self, elapsed: int):
        terms = self.conservation_terms()
        injected = self.n_injected + sum(len(d) for d in self.source_pending.values())
        if sum(terms.values()) != injected:
            raise InvariantError(f"cycle {elapsed}: packet conservation broken: {terms} vs {injected}")
        cap = self.config.tf_queue_capacity_bytes
        for i, b in enumerate(self.cbu_bytes):
            if b > cap or b < 0:
                raise InvariantError(f"cycle {elapsed}: CBU {self.cbu_coord[i]} holds {b} bytes (cap {cap})")
        for key, q in (*self.queues.items(), *self.inbox.items()):
            if q.bytes + q.reserved > q.cap or q.reserved < 0:
                raise InvariantError(f"cycle {elapsed}: queue {key} at CBU {self.cbu_coord[q.host]} "
                                     f"holds {q.bytes}+{q.reserved} bytes (cap {q.cap})")
        for x, c in zip(self.tbus, self.flushed_counters(elapsed)):
            if sum(c) != elapsed:
                raise InvariantError(f"cycle {elapsed}: TBU {x.coord} counters {c} do not sum to {elapsed}")
            if x.state == BUSY and x.config is None:
                raise InvariantError(f"cycle {elapsed}: TBU {x.coord} executing without a configuration")

    # ------------------------------------------------------------------
    def write_trace(self, path) -> None:
        """Binary event log: little-endian records of cycle u64, unit u32,
        event u8, payload u64."""
        with open(path, "wb") as f:
            for cyc, unit, ev, payload in self.trace:
                f.write(TRACE_RECORD.pack(cyc, unit, ev, payload))


def read_event_trace(path) -> list[tuple]:
    data = open(path, "rb").read()
    n = TRACE_RECORD.size
    if len(data) % n:
        raise ValueError(f"{path}: truncated trace record at offset {len(data) - len(data) % n}")
    return [TRACE_RECORD.unpack_from(data, i) for i in range(0, len(data), n)]
