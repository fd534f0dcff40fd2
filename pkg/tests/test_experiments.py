import json
import statistics
from dataclasses import replace

import pytest

from octosim.experiments import (ExperimentConfig, ExperimentError, MemoryBudgetError, best_cell,
                                 compare, load_config, run, sweep, wafer_mode)
from octosim.fabric import TilingError
from octosim.metrics import utilization
from octosim.workloads import PRESETS

SMALL = {"packets_per_stream": 10}


def _cfg(**kw):
    return ExperimentConfig(benchmark_overrides=dict(SMALL), **kw)


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ExperimentError, match="unknown config keys"):
        ExperimentConfig.from_dict({"benchmark": "ER", "colour": "red"})
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ExperimentError):
        load_config(p)


def test_every_field_has_a_default():
    cfg = ExperimentConfig()
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_overrides_reach_nested_dicts():
    cfg = ExperimentConfig().with_overrides(["fabric.reconfig_latency=500", "seed=4",
                                             "benchmark_overrides.stream_count=2"])
    assert cfg.fabric == {"reconfig_latency": 500} and cfg.seed == 4
    assert cfg.benchmark_overrides == {"stream_count": 2}
    with pytest.raises(ExperimentError):
        ExperimentConfig().with_overrides(["fabric"])


def test_run_writes_summary_and_is_deterministic(tmp_path):
    a = run(_cfg(benchmark="ER", suite="combined", seed=1, output_dir=str(tmp_path / "a")))
    run(_cfg(benchmark="ER", suite="combined", seed=1, output_dir=str(tmp_path / "b")))
    sa = (tmp_path / "a" / "summary.json").read_bytes()
    assert sa == (tmp_path / "b" / "summary.json").read_bytes()
    assert json.loads(sa)["total_cycles"] == a.total_cycles
    assert a.drained


def test_cluster_size_seven_is_tiling_error():
    with pytest.raises(TilingError):
        run(_cfg(cluster_size=7))


def test_single_cell_sweep_equals_run():
    cfg = _cfg(benchmark="OCR", suite="proactive")
    rows = sweep(replace(cfg, diffusion_periods=(100_000,)))
    rep = run(replace(cfg, fabric={"diffusion_period": 100_000}))
    assert len(rows) == 1
    assert rows[0]["total_cycles"] == rep.total_cycles
    assert rows[0]["utilization"] == utilization(rep)


def test_sweep_table_shape_and_parallel_equivalence(tmp_path):
    cfg = _cfg(benchmark="DPSR", suite="combined", diffusion_periods=(10_000, 1_000_000),
               cluster_sizes=(2, 4), output_dir=str(tmp_path / "s"))
    serial = sweep(cfg, workers=1)
    parallel = sweep(replace(cfg, output_dir=str(tmp_path / "p")), workers=2)
    assert serial == parallel
    assert len(serial) == 4
    assert (tmp_path / "s" / "sweep.csv").read_bytes() == (tmp_path / "p" / "sweep.csv").read_bytes()
    best, means = best_cell(serial, "cluster_size")
    assert best in (2, 4) and means[best] == max(means.values())


def test_sweep_records_failures_per_cell():
    rows = sweep(_cfg(cluster_sizes=(4, 7)))
    by = {r["cluster_size"]: r for r in rows}
    assert by[4]["error"] == "" and "TilingError" in by[7]["error"]
    with pytest.raises(ExperimentError, match="every sweep cell failed"):
        sweep(_cfg(cluster_sizes=(7,)))


def test_best_cell_ties_go_to_smallest():
    rows = [{"cluster_size": c, "utilization": 0.5, "error": ""} for c in (8, 4)]
    assert best_cell(rows, "cluster_size")[0] == 4


def test_compare_baseline_vs_itself():
    res = compare(_cfg(), ["baseline", "baseline"], ["ER", "OCR"])
    assert all(r["speedup"] == 1.0 for r in res["rows"])
    assert res["geomean"] == {"baseline": 1.0}


def test_compare_shape(tmp_path):
    suites = ["baseline", "adaptive", "proactive", "combined"]
    res = compare(_cfg(output_dir=str(tmp_path)), suites, sorted(PRESETS))
    assert len(res["rows"]) == 6 * 4 and set(res["geomean"]) == set(suites)
    lines = (tmp_path / "speedups.csv").read_text().splitlines()
    assert len(lines) == 1 + 24 + 4
    with pytest.raises(ExperimentError):
        compare(_cfg(), ["baseline"])


def test_wafer_single_die_matches_plain_run(tmp_path):
    cfg = _cfg(benchmark="CMR", suite="combined")
    a = wafer_mode(replace(cfg, output_dir=str(tmp_path / "w")), dies=(1, 1))
    b = run(replace(cfg, output_dir=str(tmp_path / "p")))
    assert a == b
    assert (tmp_path / "w" / "summary.json").read_bytes() == (tmp_path / "p" / "summary.json").read_bytes()


def test_wafer_heatmap_covers_all_dies(tmp_path):
    rep = wafer_mode(_cfg(benchmark="ER", suite="combined", output_dir=str(tmp_path)))
    assert rep.cluster_grid == (16, 8)
    dies = {(c["die_row"], c["die_col"]) for c in rep.cluster_counters}
    assert dies == {(r, c) for r in range(4) for c in range(4)}
    rows = (tmp_path / "heatmap.csv").read_text().splitlines()
    assert len(rows) == 1 + 128 * rep.n_epochs

    # with equal intra- and inter-die bandwidth a die behaves like a
    # single-die run: the wafer mean sits inside the single-die spread
    singles = [utilization(run(_cfg(benchmark="ER", suite="combined", seed=s))) for s in range(1, 17)]
    mu, sd = statistics.mean(singles), statistics.pstdev(singles)
    assert abs(statistics.mean(utilization(rep, "cluster")) - mu) <= 2 * sd


def test_wafer_memory_guard():
    with pytest.raises(MemoryBudgetError):
        wafer_mode(replace(_cfg(), memory_budget_mb=1))
