import json
import subprocess
import sys

import pytest

from octosim.cli import main
from octosim.experiments import ExperimentConfig, run

SMALL = ["--set", "benchmark_overrides.packets_per_stream=10"]


def test_run_smoke_and_library_equivalence(tmp_path, capsys):
    out = tmp_path / "cli"
    assert main(["run", "--benchmark", "ER", "--suite", "combined", "--seed", "1", "-o", str(out), *SMALL]) == 0
    assert "summary.json" in capsys.readouterr().out
    run(ExperimentConfig(benchmark="ER", suite="combined", seed=1, output_dir=str(tmp_path / "lib"),
                         benchmark_overrides={"packets_per_stream": 10}))
    assert (out / "summary.json").read_bytes() == (tmp_path / "lib" / "summary.json").read_bytes()


def test_run_twice_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["run", "--benchmark", "OCR", "-o", str(tmp_path / d), *SMALL]) == 0
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("OCTOSIM_OUTPUT_DIR", str(tmp_path))
    assert main(["run", "--benchmark", "OCR", *SMALL]) == 0
    assert (tmp_path / "summary.json").exists()


@pytest.mark.parametrize("argv,code", [
    (["run", "--cluster-size", "7", *SMALL], 4),
    (["run", "--set", "colour=red"], 2),
    (["run", "--set", "fabric.livelock_window=10", *SMALL], 5),
    (["wafer", "--set", "memory_budget_mb=1"], 7),
    (["run", "--set", "benchmark_overrides.sub_owg_count=9", *SMALL], 3),
])
def test_exit_codes(argv, code, capsys):
    assert main(argv) == code
    assert "octosim: error:" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["run", "--benchmark", "NOPE"])
    assert e.value.code == 2


def test_config_file_and_corrupt_trace(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"benchmark": "SFR", "benchmark_overrides": {"packets_per_stream": 10}}))
    assert main(["run", "--config", str(cfg)]) == 0
    bad = tmp_path / "bad.trace"
    bad.write_bytes(b"OCTR\x01")
    assert main(["run", "--config", str(cfg), "--set", f"trace_path={bad}"]) == 8


def test_gen_then_validate_then_run_custom(tmp_path, capsys):
    assert main(["gen", "OCR", "-o", str(tmp_path)]) == 0
    graph = tmp_path / "OCR.owg.json"
    assert main(["validate", str(graph)]) == 0
    assert "ok" in capsys.readouterr().out
    assert main(["run", "--set", f"graph_path={graph}", "--set", f"trace_path={tmp_path / 'OCR.trace'}",
                 "--set", "benchmark_overrides.target_rate=0.00025", "--max-cycles", "200000"]) == 0


def test_validate_reports_violations(tmp_path, capsys):
    assert main(["gen", "ER", "-o", str(tmp_path)]) == 0
    p = tmp_path / "ER.owg.json"
    d = json.loads(p.read_text())
    d["edges"] = [e for e in d["edges"] if e["to"] != "sink"]
    p.write_text(json.dumps(d))
    assert main(["validate", str(p)]) == 3
    assert "sink" in capsys.readouterr().out


def test_sweep_and_compare_print_tables(capsys):
    assert main(["sweep", "--benchmark", "OCR", "--cluster-sizes", "2", "4", *SMALL]) == 0
    assert "best cluster_size" in capsys.readouterr().out
    assert main(["compare", "--benchmarks", "OCR", "--suites", "baseline", "combined", *SMALL]) == 0
    assert "geomean combined" in capsys.readouterr().out


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "octosim.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep" in r.stdout
