import json
import subprocess
import sys
from pathlib import Path

import pytest

TINY_CONFIG = {
    "seed": 7,
    "corpus": {
        "n_contributors": 3,
        "n_participants": 1,
        "ambient_low": 15.0,
        "ambient_high": 30.0,
        "grid_step": 1.0,
        "sessions_per_phone": 16,
        "session_seconds_min": 180.0,
        "session_seconds_max": 240.0,
    },
    "estimator": {"max_epochs": 60},
    "cbts": {"n_train_groups": 300, "n_val_groups": 80, "n_test_groups": 300, "max_epochs": 40},
    "fewshot": {
        "n_batch": 50,
        "n_train_tasks": 300,
        "n_val_tasks": 60,
        "max_epochs": 12,
        "k_qry": 10,
        "repetitions": 3,
    },
    "fed": {"n_clients": 2, "rounds": 1, "key_bits": 512, "n_tasks_per_client": 5},
}

STAGES = (
    "synth",
    "train-estimators",
    "train-cbts",
    "truthinf-bench",
    "gen-labels",
    "fewshot",
    "fed",
    "report",
)


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "phonetemp.cli", *args],
        capture_output=True,
        text=True,
    )


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    config_path = base / "config.json"
    out_dir = base / "out"
    config = dict(TINY_CONFIG, out_dir=str(out_dir))
    config_path.write_text(json.dumps(config))
    for stage in STAGES:
        proc = run_cli(stage, "--config", str(config_path), "--deterministic")
        assert proc.returncode == 0, f"{stage} failed:\n{proc.stderr}\n{proc.stdout}"
    return config_path, out_dir


def test_all_stages_succeed(tiny_run):
    _, out_dir = tiny_run
    for table in (
        "corpus_summary",
        "estimators",
        "cbts_training",
        "truthinf_bench",
        "label_quality",
        "fewshot",
        "fed_rounds",
    ):
        assert (out_dir / "tables" / f"{table}.csv").exists()
    assert (out_dir / "report.md").exists()
    assert (out_dir / "fed" / "transcript.jsonl").exists()
    assert list((out_dir / "plots").glob("*.svg"))


def test_tables_embed_checksum_and_seeds(tiny_run):
    _, out_dir = tiny_run
    text = (out_dir / "tables" / "estimators.csv").read_text()
    lines = text.splitlines()
    assert lines[0].startswith("# config_checksum=")
    assert lines[1].startswith("# seeds=")


def test_stage_rerun_is_byte_identical(tiny_run):
    config_path, out_dir = tiny_run
    table = out_dir / "tables" / "truthinf_bench.csv"
    before = table.read_bytes()
    proc = run_cli("truthinf-bench", "--config", str(config_path), "--deterministic")
    assert proc.returncode == 0
    assert table.read_bytes() == before


def test_report_idempotent(tiny_run):
    config_path, out_dir = tiny_run
    report = out_dir / "report.md"
    before = report.read_bytes()
    proc = run_cli("report", "--config", str(config_path))
    assert proc.returncode == 0
    assert report.read_bytes() == before


def test_missing_prerequisite_fails_cleanly(tmp_path):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(dict(TINY_CONFIG, out_dir=str(tmp_path / "empty"))))
    proc = run_cli("truthinf-bench", "--config", str(config_path))
    assert proc.returncode == 1
    assert "synth" in proc.stderr or "train-estimators" in proc.stderr


def test_report_names_missing_stages(tmp_path):
    out = tmp_path / "out"
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(dict(TINY_CONFIG, out_dir=str(out))))
    proc = run_cli("synth", "--config", str(config_path))
    assert proc.returncode == 0
    proc = run_cli("report", "--config", str(config_path))
    assert proc.returncode == 1
    assert "missing stage outputs" in proc.stderr


def test_unknown_stage_rejected():
    proc = run_cli("frobnicate")
    assert proc.returncode == 2  # argparse usage error


def test_seed_override_changes_checksum(tiny_run, tmp_path):
    config_path, _ = tiny_run
    out = tmp_path / "other"
    proc = run_cli("synth", "--config", str(config_path), "--seed", "99", "--out", str(out))
    assert proc.returncode == 0
    meta = json.loads((out / "run_meta.json").read_text())
    original = json.loads(Path(config_path).read_text())
    assert meta["config_checksum"]  # present
    proc2 = run_cli("synth", "--config", str(config_path), "--out", str(out / "same"))
    assert proc2.returncode == 0
    meta2 = json.loads((out / "same" / "run_meta.json").read_text())
    assert meta["config_checksum"] != meta2["config_checksum"]


def test_bad_config_key_fails(tmp_path):
    config_path = tmp_path / "bad.json"
    config_path.write_text('{"definitely_not_a_key": 1}')
    proc = run_cli("synth", "--config", str(config_path))
    assert proc.returncode == 1
    assert "unknown" in proc.stderr
