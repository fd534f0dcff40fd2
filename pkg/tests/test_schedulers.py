import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octosim.fabric import Fabric, FabricConfig
from octosim.fabric.engine import EV_ASSIGN, EV_EXEC, EV_SIGNAL
from octosim.owg import DataPacket
from octosim.partition import ClusterPlan, SubOwg, build_plan
from octosim.schedulers import (ADAPTIVE_ONLY, BASELINE, INPUT_IDLE, OUTPUT_CONGESTED, SUITES,
                                SchedulerSuite, adaptive_tbu_on_signal, diffusive_exchange,
                                proactive_select, reactive_central_rebalance, rebind_flows,
                                suite_from)
from octosim.workloads import chain_workload

from graphs import linear

KB = 1024


# ---------------------------------------------------------------- suites

def test_four_configurations_expressible():
    assert {SUITES[k] for k in ("baseline", "adaptive", "proactive", "combined")} == {
        SchedulerSuite(t, c) for t in ("StaticTbu", "AdaptiveTbu")
        for c in ("StaticCluster", "ProactiveDiffusive")}
    assert suite_from({"tbu_policy": "AdaptiveTbu"}) == ADAPTIVE_ONLY
    with pytest.raises(ValueError):
        suite_from("nope")
    with pytest.raises(ValueError):
        SchedulerSuite("Greedy")


# ---------------------------------------------------------------- adaptive TBU

CHAIN = ("A", "B", "C")


def test_input_idle_picks_longest_upstream():
    assert adaptive_tbu_on_signal(INPUT_IDLE, "C", CHAIN, {"A": 5, "B": 1}, {"A": 1, "B": 1}) == "A"


def test_all_queues_empty_is_no_change():
    assert adaptive_tbu_on_signal(INPUT_IDLE, "B", CHAIN, {}, {"A": 1, "B": 1, "C": 1}) is None
    assert adaptive_tbu_on_signal(OUTPUT_CONGESTED, "A", CHAIN, {}, {"A": 1, "B": 1, "C": 1}) is None


def test_hysteresis_floor():
    reps = {"A": 1, "B": 1, "C": 1}
    assert adaptive_tbu_on_signal(INPUT_IDLE, "C", CHAIN, {"A": 1}, reps) is None
    assert adaptive_tbu_on_signal(INPUT_IDLE, "C", CHAIN, {"A": 2}, reps) == "A"
    # an unstaffed TB is claimed by a single queued packet
    assert adaptive_tbu_on_signal(INPUT_IDLE, "C", CHAIN, {"A": 1}, {"C": 3}) == "A"


def test_congested_looks_downstream_and_ties_go_early():
    q = {"A": 9, "B": 4, "C": 4}
    assert adaptive_tbu_on_signal(OUTPUT_CONGESTED, "A", CHAIN, q, {}) == "B"


def test_head_of_chain_idle_falls_back_downstream():
    assert adaptive_tbu_on_signal(INPUT_IDLE, "A", CHAIN, {"B": 3}, {"B": 1}) == "B"


def _emotion_infer(suite, n=60):
    # two-TB pipeline whose second TB doubles its cycles half way through
    g, sched = chain_workload([1000, 1000], n, traces={1: [1000] * (n // 2) + [2000] * (n // 2)})
    plan = build_plan(g, target_rate=2e-3, cluster_size=4)
    f = Fabric(FabricConfig(tbu_grid=(1, 4)), plan, g, suite, trace=True)
    f.attach(sched)
    f.run()
    return f


def test_slowdown_reassigns_within_one_round_trip():
    f = _emotion_infer(ADAPTIVE_ONLY)
    home = {u: p for c, u, e, p in f.trace if e == EV_EXEC and c == 0}
    round_trip = 2 * f.config.control_hop_latency
    hits = []
    for c, u, e, p in f.trace:
        if e == EV_SIGNAL and home.get(u) == 0 and p == 1:
            hits += [c2 - c for c2, u2, e2, p2 in f.trace
                     if e2 == EV_ASSIGN and u2 == u and p2 == 1 and 0 < c2 - c <= round_trip]
    assert hits, "no TB0 -> TB1 reassignment after the slowdown"
    assert not [e for e in _emotion_infer(BASELINE).trace if e[2] == EV_ASSIGN]


# ---------------------------------------------------------------- rebind

def test_rebind_minimal_movement():
    bindings, moved, changed = rebind_flows({0: "A", 1: "A"}, {0: "A", 1: "B"})
    assert bindings == {"A": [0], "B": [1]} and moved == 0 and changed == [1]


def test_rebind_identity():
    assert rebind_flows({0: "A", 1: "B"}, {0: "A", 1: "B"})[1:] == (0, [])


def test_round_robin_over_three_replicas():
    g = linear((30,))
    sub = SubOwg(0, ("tb0",), "source", "sink", 3, {"tb0": 3})
    f = Fabric(FabricConfig(tbu_grid=(1, 3)), ClusterPlan(3, (sub,), {0: (0, 0, 0)}), g, trace=True)
    f.attach([(10 * i, DataPacket(0, i, (), 1024)) for i in range(12)])
    f.run()
    units = [u for _, u, e, _ in f.trace if e == EV_EXEC]
    assert units == [i % 3 for i in range(12)]


# ---------------------------------------------------------------- diffusive

def test_second_largest_sends_to_minimum():
    nb = {"N": {0: 2 * KB}, "S": {0: 4 * KB}, "E": {0: 12 * KB}, "W": {0: 3 * KB}}
    assert diffusive_exchange({0: 10 * KB}, nb, 1 << 20) == [(0, "N", 4 * KB)]


def test_smallest_sends_nothing():
    nb = {d: {0: v * KB} for d, v in zip("NSEW", (5, 6, 7, 8))}
    assert diffusive_exchange({0: 1 * KB}, nb, 1 << 20) == []


def test_uniform_loads_are_steady():
    nb = {d: {0: 4 * KB} for d in "NSEW"}
    assert diffusive_exchange({0: 4 * KB}, nb, 1 << 20) == []


def test_quantum_capped_and_boundary_neighbours_only():
    assert diffusive_exchange({0: 100 * KB}, {"S": {0: 0}}, 8 * KB) == [(0, "S", 8 * KB)]
    assert diffusive_exchange({0: 100 * KB}, {}, 8 * KB) == []


def test_min_neighbour_ties_break_nsew():
    nb = {d: {0: KB} for d in "WES"}
    assert diffusive_exchange({0: 9 * KB}, nb, 1 << 20) == [(0, "S", 4 * KB)]


@given(st.integers(0, 10**6), st.lists(st.integers(0, 10**6), min_size=1, max_size=4),
       st.integers(1, 10**6))
@settings(max_examples=200, deadline=None)
def test_diffusion_never_overshoots(mine, others, cap):
    nb = {d: {0: v} for d, v in zip("NSEW", others)}
    out = diffusive_exchange({0: mine}, nb, cap)
    for _, d, q in out:
        assert 0 < q <= cap
        assert mine - q >= nb[d][0] + q
    assert out == diffusive_exchange({0: mine}, nb, cap)


# ---------------------------------------------------------------- proactive cluster

def test_proactive_picks_longest_queue():
    assert proactive_select({1: 0, 2: 10 * KB, 3: 40 * KB}, 1) == 3


def test_proactive_self_selection_is_no_change():
    assert proactive_select({1: 50 * KB, 2: 10 * KB}, 1) is None


def test_proactive_all_empty_is_no_change():
    assert proactive_select({0: 0, 1: 0}, 0) is None


def test_proactive_ties_to_lowest_id():
    assert proactive_select({3: KB, 2: KB, 0: 0}, 0) == 2


# ---------------------------------------------------------------- reactive baseline

def test_reactive_equalizes_to_mean():
    moves = reactive_central_rebalance({0: 100 * KB, 1: 100 * KB, 2: 100 * KB, 3: 900 * KB}, 4.0)
    assert moves == [(3, 0, 200 * KB), (3, 1, 200 * KB), (3, 2, 200 * KB)]
    assert sum(m[2] for m in moves) == 600 * KB


def test_reactive_within_ratio_is_quiet():
    assert reactive_central_rebalance({0: 100, 1: 300, 2: 400}, 4.0) == []
