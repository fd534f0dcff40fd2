"""Scheduling policies.

The engine owns all state; the functions here are pure decision rules it
calls from its scheduler hooks.  Every rule has a documented tie-break so
repeated evaluation on identical state gives identical choices.
"""

from __future__ import annotations

from dataclasses import dataclass

INPUT_IDLE = "InputIdle"
OUTPUT_CONGESTED = "OutputCongested"

TBU_POLICIES = ("StaticTbu", "AdaptiveTbu")
CLUSTER_POLICIES = ("StaticCluster", "ReactiveCentral", "ProactiveDiffusive")
DIRECTIONS = ("N", "S", "E", "W")


@dataclass(frozen=True)
class SchedulerSuite:
    tbu_policy: str = "StaticTbu"
    cluster_policy: str = "StaticCluster"

    def __post_init__(self):
        if self.tbu_policy not in TBU_POLICIES:
            raise ValueError(f"unknown tbu_policy {self.tbu_policy!r}")
        if self.cluster_policy not in CLUSTER_POLICIES:
            raise ValueError(f"unknown cluster_policy {self.cluster_policy!r}")

    @property
    def adaptive(self) -> bool:
        return self.tbu_policy == "AdaptiveTbu"

    @property
    def name(self) -> str:
        return SUITE_NAMES.get(self, f"{self.tbu_policy}+{self.cluster_policy}")

    def to_dict(self) -> dict:
        return {"tbu_policy": self.tbu_policy, "cluster_policy": self.cluster_policy}


BASELINE = SchedulerSuite("StaticTbu", "StaticCluster")
ADAPTIVE_ONLY = SchedulerSuite("AdaptiveTbu", "StaticCluster")
PROACTIVE_ONLY = SchedulerSuite("StaticTbu", "ProactiveDiffusive")
COMBINED = SchedulerSuite("AdaptiveTbu", "ProactiveDiffusive")
REACTIVE = SchedulerSuite("StaticTbu", "ReactiveCentral")

SUITES = {
    "baseline": BASELINE,
    "adaptive": ADAPTIVE_ONLY,
    "proactive": PROACTIVE_ONLY,
    "combined": COMBINED,
    "reactive": REACTIVE,
}
SUITE_NAMES = {v: k for k, v in SUITES.items()}


def suite_from(spec) -> SchedulerSuite:
    if isinstance(spec, SchedulerSuite):
        return spec
    if isinstance(spec, str):
        try:
            return SUITES[spec]
        except KeyError:
            raise ValueError(f"unknown suite {spec!r}; choose from {sorted(SUITES)}") from None
    return SchedulerSuite(**spec)


def adaptive_tbu_on_signal(signal: str, tb: str, chain, queue_packets: dict, replicas: dict,
                           floor: int = 2):
    """Pick the TB an idle or congested TBU should switch to, or None.

    InputIdle looks at upstream TBs first (falling back to downstream ones
    for the head of the chain); OutputCongested looks downstream.  The TB
    with the longest input queue wins, ties to the earliest in the chain.
    Queues shorter than ``floor`` packets never justify a switch, except
    that a TB left without replicas is claimed by any queued packet.
    """
    i = chain.index(tb)
    if signal == INPUT_IDLE:
        groups = [chain[:i], chain[i + 1:]]
    elif signal == OUTPUT_CONGESTED:
        groups = [chain[i + 1:]]
    else:
        raise ValueError(f"unknown signal {signal!r}")
    for cands in groups:
        if not cands:
            continue
        best = cands[0]
        for c in cands[1:]:
            if queue_packets.get(c, 0) > queue_packets.get(best, 0):
                best = c
        need = floor if replicas.get(best, 0) else 1
        if queue_packets.get(best, 0) >= need:
            return best
    return None


def rebind_flows(old: dict, new: dict):
    """Rebind Task Flow allocation after a TBU reassignment.

    ``old``/``new`` map TBU index -> TB id.  Returns (bindings, moved_bytes,
    changed): per-TB replica lists in round-robin order, bytes that must be
    moved (queues are banked per cluster, so rebinding never moves data) and
    the TBUs whose input binding changed.
    """
    bindings: dict[str, list[int]] = {}
    for tbu in sorted(new):
        bindings.setdefault(new[tbu], []).append(tbu)
    changed = sorted(t for t in new if old.get(t) != new[t])
    return bindings, 0, changed


def diffusive_exchange(self_load: dict, neighbor_loads: dict, cap_bytes: int):
    """One Diffusive Load-Balancing round for one CBU.

    ``neighbor_loads`` maps direction (N/S/E/W, only existing neighbours) to
    a per-sub-OWG byte dict.  Returns a list of (sub_owg, direction,
    quantum_bytes); the caller rounds the quantum down to whole packets.
    """
    out = []
    dirs = [d for d in DIRECTIONS if d in neighbor_loads]
    if not dirs:
        return out
    for sub in sorted(self_load):
        mine = self_load[sub]
        if mine <= 0:
            continue
        loads = [(neighbor_loads[d].get(sub, 0), d) for d in dirs]
        # largest or second largest: at most one neighbour at or above us
        if sum(1 for v, _ in loads if v >= mine) > 1:
            continue
        low, target = loads[0]
        for v, d in loads[1:]:
            if v < low:
                low, target = v, d
        quantum = min((mine - low) // 2, cap_bytes)
        if quantum > 0:
            out.append((sub, target, quantum))
    return out


def proactive_select(queued_bytes: dict, running, candidates=None):
    """Sub-OWG with the longest queue (ties to the lowest id), or None when
    nothing is queued or the running sub-OWG already wins."""
    best, best_bytes = None, 0
    for sub in sorted(queued_bytes if candidates is None else candidates):
        b = queued_bytes.get(sub, 0)
        if b > best_bytes:
            best, best_bytes = sub, b
    if best is None or best == running:
        return None
    return best


def reactive_central_rebalance(loads: dict, threshold: float, floor_bytes: int = 0):
    """Centralised baseline: once max/min load exceeds ``threshold``, move
    load from clusters above the mean to clusters below it.

    ``loads`` maps cluster -> bytes for one sub-OWG.  Returns (src, dst,
    bytes) moves, donors in decreasing load order, receivers in increasing
    load order (ties by cluster id).
    """
    if len(loads) < 2:
        return []
    hi = max(loads.values())
    lo = min(loads.values())
    if hi <= threshold * max(lo, floor_bytes):
        return []
    mean = sum(loads.values()) / len(loads)
    donors = sorted((c for c in loads if loads[c] > mean), key=lambda c: (-loads[c], c))
    takers = sorted((c for c in loads if loads[c] < mean), key=lambda c: (loads[c], c))
    excess = {c: loads[c] - mean for c in donors}
    deficit = {c: mean - loads[c] for c in takers}
    moves = []
    for d in donors:
        for r in takers:
            amt = int(min(excess[d], deficit[r]))
            if amt <= 0:
                continue
            moves.append((d, r, amt))
            excess[d] -= amt
            deficit[r] -= amt
    return moves
