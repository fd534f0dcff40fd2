import hashlib
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octosim.owg import NodeKind, validate
from octosim.partition import build_plan
from octosim.workloads import (PRESETS, BenchmarkSpec, SpecError, TraceFormatError,
                               decode_schedule, encode_schedule, fanout_tags, generate_benchmark,
                               generate_input, load_spec, preset, read_trace, structure_counts,
                               write_trace)

from oracles import PhiloxStream, truncated_poisson_inverse


def _fanout_key():
    return int.from_bytes(hashlib.blake2b(b"fanout", digest_size=8).digest(), "little")


def test_fanout_golden_seed_11():
    golden = [3, 3, 4, 4, 0, 1, 4, 1, 2, 0]
    s = PhiloxStream(11, _fanout_key())
    assert [truncated_poisson_inverse(s.uniform(), 2.0, 8) for _ in range(10)] == golden
    assert fanout_tags(2.0, 8, 10, 11) == golden


@pytest.mark.parametrize("name", ["ER", "OCR"])
def test_generated_counts_match_spec(name):
    spec = preset(name)
    g, _ = generate_benchmark(spec, 1)
    c = structure_counts(g)
    assert (c["expand"], c["condition"], c["sub_owg"], c["task_block"], c["cluster_scale"]) == (
        spec.expand_count, spec.condition_count, spec.sub_owg_count, spec.task_block_count,
        spec.cluster_scale)


def test_degenerate_spec_is_single_tb_chain():
    g, _ = generate_benchmark(BenchmarkSpec("tiny", 0, 0, 1, 1, 1), 0)
    assert [n.kind for n in g.nodes] == [NodeKind.SOURCE, NodeKind.TASK, NodeKind.SINK]


def test_infeasible_spec_is_descriptive():
    with pytest.raises(SpecError, match="at least one TB"):
        generate_benchmark(BenchmarkSpec("bad", 0, 0, 3, 2, 1), 0)
    with pytest.raises(SpecError, match="fuse"):
        generate_benchmark(BenchmarkSpec("bad", 0, 0, 2, 2, 1), 0)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate_and_calibrate(name):
    spec = preset(name)
    g, profiles = generate_benchmark(spec, 3)
    assert validate(g).ok
    assert build_plan(g, target_rate=spec.target_rate).cluster_size == spec.cluster_scale
    assert profiles == g.profiles()


def test_input_counts():
    sched = generate_input(preset("ER", stream_count=2, packets_per_stream=10), 0)
    assert len(sched) == 20
    assert sorted({p.stream_id for _, p in sched}) == [0, 1]


def test_video_tags_hold_for_a_segment():
    sched = generate_input(preset("ER", stream_count=1, packets_per_stream=64, segment_length=32), 5)
    metas = [p.meta for _, p in sched]
    assert len(set(metas[:32])) == 1 and len(set(metas[32:])) == 1


def test_bursty_schedule_groups_streams():
    spec = preset("CMR", bursty=True, stream_count=2, packets_per_stream=8, burst_length=4,
                  inject_interval=10)
    ids = [p.stream_id for _, p in generate_input(spec, 0)]
    assert ids == [0] * 4 + [1] * 4 + [0] * 4 + [1] * 4


def test_schedule_file_byte_identical(tmp_path):
    spec = preset("SFR")
    write_trace(tmp_path / "a.bin", generate_input(spec, 9))
    write_trace(tmp_path / "b.bin", generate_input(spec, 9))
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert generate_input(spec, 10) != generate_input(spec, 9)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_trace_round_trip(tmp_path, name):
    sched = generate_input(preset(name), 2)
    write_trace(tmp_path / "t.bin", sched)
    assert read_trace(tmp_path / "t.bin") == sched


def test_empty_schedule_is_minimal_file():
    data = encode_schedule([])
    assert len(data) == 10 and decode_schedule(data) == []


def test_flipped_version_byte_rejected():
    data = bytearray(encode_schedule(generate_input(preset("OCR"), 0)))
    data[4] ^= 0xFF
    with pytest.raises(TraceFormatError, match="version"):
        decode_schedule(bytes(data))


def test_truncation_reports_offset():
    data = encode_schedule(generate_input(preset("OCR"), 0))
    with pytest.raises(TraceFormatError, match="offset"):
        decode_schedule(data[:-5])
    with pytest.raises(TraceFormatError, match="magic"):
        decode_schedule(b"XXXX" + data[4:])


def test_spec_file_with_preset_overrides(tmp_path):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps({"preset": "DPSR", "stream_count": 2}))
    assert load_spec(p) == preset("DPSR", stream_count=2)


@given(st.sampled_from(sorted(PRESETS)), st.integers(0, 10**6))
@settings(max_examples=15, deadline=None)
def test_generation_is_deterministic(name, seed):
    spec = preset(name, packets_per_stream=8)
    assert generate_benchmark(spec, seed) == generate_benchmark(spec, seed)
    assert encode_schedule(generate_input(spec, seed)) == encode_schedule(generate_input(spec, seed))
