import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octosim.fabric import (Fabric, FabricConfig, InvariantError, TilingError, read_event_trace,
                            tile_shape)
from octosim.fabric.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from octosim.fabric.engine import (BUSY, EV_DONE, EV_EXEC, EV_RECONF, EV_RECONF_DONE, RECONF,
                                   STALL)
from octosim.owg import DataPacket, ExecTimeModel
from octosim.partition import ClusterPlan, SubOwg, build_plan
from octosim.schedulers import BASELINE, COMBINED

from graphs import linear
from oracles import drain_cycles, transfer_arrival


def _pipeline_plan(n_tbs):
    tbs = tuple(f"tb{i}" for i in range(n_tbs))
    sub = SubOwg(0, tbs, "source", "sink", n_tbs, {tb: 1 for tb in tbs})
    return ClusterPlan(n_tbs, (sub,), {0: tuple(range(n_tbs))})


def _fabric(cycles=(10,), grid=None, suite=BASELINE, **cfg):
    g = linear(cycles)
    plan = _pipeline_plan(len(cycles))
    f = Fabric(FabricConfig(tbu_grid=grid or (1, len(cycles)), **cfg), plan, g, suite, trace=True)
    return f


def _packets(n, size=1024, every=0):
    return [(every * q, DataPacket(0, q, (), size)) for q in range(n)]


# ---------------------------------------------------------------- init

@pytest.mark.parametrize("size,shape,count", [(8, (2, 4), 8), (4, (2, 2), 16)])
def test_tiling(size, shape, count):
    assert tile_shape(size, (8, 8)) == shape
    g = linear((100,) * 1)
    sub = SubOwg(0, ("tb0",), "source", "sink", size, {"tb0": size})
    f = Fabric(FabricConfig(), ClusterPlan(size, (sub,), {0: (0,) * size}), g)
    assert len(f.clusters) == count
    assert all(cl.shape == shape for cl in f.clusters)


def test_non_tiling_cluster_rejected():
    with pytest.raises(TilingError):
        tile_shape(7, (8, 8))


# ---------------------------------------------------------------- step / run

def test_five_packet_drain_matches_hand_trace():
    f = _fabric((10,))
    f.attach(_packets(5))
    assert f.run() == drain_cycles(5, 10) == 50
    assert f.sink_times == [10, 20, 30, 40, 50]


def test_five_packet_reference_mode_agrees():
    f = Fabric(FabricConfig(tbu_grid=(1, 1)), _pipeline_plan(1), linear((10,)), reference=True)
    f.attach(_packets(5))
    assert f.run() == 50


def test_backpressure_stalls_without_loss():
    f = _fabric((10, 100), tf_queue_capacity_bytes=4096)
    f.attach(_packets(20))
    f.run()
    stall = f.flushed_counters()[0][STALL]
    assert stall > 0
    assert f.sink_count == 20 and f.drained()


def test_idle_fabric_counts_idle():
    f = _fabric((10,))
    f.attach([])
    for _ in range(10):
        f.step()
    assert f.flushed_counters() == [[10, 0, 0, 0]]


def test_empty_workload_drains_at_zero():
    f = _fabric((10,))
    f.attach([])
    assert f.run() == 0 and f.drained()


def test_cycle_limit_stops_run():
    f = _fabric((10,))
    f.attach(_packets(10_000))
    assert f.run(100) == 100 and not f.drained()


# ---------------------------------------------------------------- reconfiguration

def _reconf_events(f):
    return [(c, u, e) for c, u, e, _ in f.trace if e in (EV_RECONF, EV_RECONF_DONE)]


def test_reconfig_latency_echoed():
    f = _fabric((10, 10))
    f.attach([])
    f.reconfigure_tbu(0, "tb1")
    for _ in range(1100):
        f.step()
    assert _reconf_events(f) == [(0, 0, EV_RECONF), (999, 0, EV_RECONF_DONE)]
    assert f.flushed_counters()[0][RECONF] == 1000
    assert f.tbus[0].config == "tb1"


def test_same_config_is_noop():
    f = _fabric((10, 10))
    f.attach([])
    f.reconfigure_tbu(0, "tb0")
    for _ in range(10):
        f.step()
    assert f.trace == [] and f.flushed_counters()[0][RECONF] == 0


def test_reconfig_waits_for_packet_boundary():
    f = _fabric((10, 10))
    f.attach([])
    f.inject(DataPacket(0, 0, (), 1024))
    for _ in range(7):
        f.step()
    x = f.tbus[0]
    assert x.state == BUSY and x.end - f.now + 1 == 3
    f.reconfigure_tbu(0, "tb1")
    for _ in range(20):
        f.step()
    started = [c for c, u, e in _reconf_events(f) if u == 0 and e == EV_RECONF]
    assert started == [f.now - 20 + 3] == [10]


def test_requests_during_reconfig_coalesce():
    f = _fabric((10, 10))
    f.attach([])
    f.reconfigure_tbu(0, "tb1")
    f.step()
    f.reconfigure_tbu(0, "tb0")
    f.reconfigure_tbu(0, "tb1")
    assert f.counters["coalesced_reconfigs"] == 2
    assert f.tbus[0].pending == "tb1"


# ---------------------------------------------------------------- transfers

def _three_clusters(**cfg):
    g = linear((1000,))
    f = Fabric(FabricConfig(tbu_grid=(1, 3), **cfg), _pipeline_plan(1), g, trace=True)
    f.attach([])
    return f


def test_transfer_arrival_formula():
    f = _three_clusters()
    assert f.cluster_hops(0, 2) == 2
    for q in range(6):
        f.inject(DataPacket(0, q, (), 1024), cluster=0)
    f.step()
    start = f.now
    assert f.transfer_load(0, 2, 0, 4096) == 4096
    f.step()
    arrive = f.net_heap[0][0]
    assert arrive - start == transfer_arrival(4, 1024, 256, 2, 2) == 20
    assert f.transfer_time(0, 2, 4096) == 20
    while f.now <= arrive:
        f.step()
    q = f.queues[(2, 0, 0)]
    assert len(q.items) + (f.tbus[2].packet is not None) == 4


def test_zero_byte_transfer_is_noop():
    f = _three_clusters()
    f.inject(DataPacket(0, 0, (), 1024), cluster=0)
    assert f.transfer_load(0, 1, 0, 0) == 0
    assert f.transfer_requests == []


def test_transfer_truncated_to_free_capacity():
    f = _three_clusters(tf_queue_capacity_bytes=4096)
    for q in range(4):
        f.inject(DataPacket(0, q, (), 1024), cluster=0)
    for q in range(4, 7):
        f.inject(DataPacket(0, q, (), 1024), cluster=1)
    assert f.queues[(1, 0, 0)].free() == 1024
    assert f.transfer_load(0, 1, 0, 4096) == 1024
    assert len(f.queues[(0, 0, 0)].items) == 3


# ---------------------------------------------------------------- control messages

def test_control_message_latency():
    f = _fabric((10,), control_hop_latency=3)
    f.attach([])
    f._send("StatusReport", (0, 0), (0, 2), {}, 2)
    msg = f.net_heap[-1]
    assert msg[0] == f.now + 6


# ---------------------------------------------------------------- trace, checkpoint

def test_event_trace_round_trip(tmp_path):
    f = _fabric((10, 20))
    f.attach(_packets(5))
    f.run()
    p = tmp_path / "events.bin"
    f.write_trace(p)
    assert read_event_trace(p) == f.trace
    assert {e for _, _, e, _ in f.trace} >= {EV_EXEC, EV_DONE}
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError, match="offset"):
        read_event_trace(p)


def test_checkpoint_resume_matches_straight_run(tmp_path):
    def make():
        g = linear((30, 70), models=[ExecTimeModel.uniform(0.5, 1.5)] * 2)
        plan = build_plan(g, target_rate=0.03)
        f = Fabric(FabricConfig(tbu_grid=(2, 4)), plan, g, COMBINED, seed=3)
        f.attach(_packets(60, every=20))
        return f

    whole = make()
    whole.run()
    part = make()
    part.run(500)
    save_checkpoint(part, tmp_path / "ck")
    resumed = load_checkpoint(tmp_path / "ck")
    resumed.run()
    assert resumed.now == whole.now
    assert resumed.flushed_counters() == whole.flushed_counters()
    (tmp_path / "bad").write_bytes(b"NOTACKPT\x01\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")


def test_debug_mode_catches_broken_conservation():
    f = Fabric(FabricConfig(tbu_grid=(1, 1)), _pipeline_plan(1), linear((10,)), debug=True)
    f.attach(_packets(3))
    f.step()
    f.sink_count += 1
    with pytest.raises(InvariantError, match="conservation"):
        f.step()


# ---------------------------------------------------------------- properties

@given(st.lists(st.integers(1, 60), min_size=1, max_size=3), st.integers(1, 40),
       st.integers(0, 30), st.floats(0.0, 1.5), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_fifo_per_stream_on_every_edge(cycles, n, gap, sigma, seed):
    g = linear(tuple(cycles), models=[ExecTimeModel.lognormal(0.0, sigma)] * len(cycles))
    f = Fabric(FabricConfig(tbu_grid=(1, len(cycles))), _pipeline_plan(len(cycles)), g,
               seed=seed, debug=True)
    popped = {}
    orig = f._queue_pop

    def spy(c, s, p, from_tail=False):
        pkt = orig(c, s, p, from_tail)
        popped.setdefault((c, s, p), []).append(pkt.seq)
        return pkt

    f._queue_pop = spy
    f.attach([(gap * q, DataPacket(q % 2, q, (), 1024)) for q in range(n)])
    f.run()
    for seqs in popped.values():
        for stream in (0, 1):
            mine = [s for s in seqs if s % 2 == stream]
            assert mine == sorted(mine)
    assert f.sink_count == n


@given(st.integers(1, 200), st.integers(1, 50))
@settings(max_examples=40, deadline=None)
def test_drain_time_matches_oracle(n, cyc):
    f = _fabric((cyc,))
    f.attach(_packets(n))
    assert f.run() == drain_cycles(n, cyc)
