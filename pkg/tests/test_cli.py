"""Command-line interface: exit codes, JSON report schemas, workflows."""

import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

SCHEMA = json.loads((Path(__file__).parent / "data" / "cli_schema.json").read_text())

TINY_SPEC = """\
levels=4,8
group_size=2
reversible=true
"""

DESK_BASE_SPEC = """\
levels=10,20
group_size=5
reversible=false
"""

FAST_CONFIG = """\
initial_lr=0.001
max_epochs=2
moving_average_window=2
patience=2
seed=0
"""


def run_cli(*args, timeout=600):
    proc = subprocess.run(
        [sys.executable, "-m", "revvolnet", *args],
        capture_output=True, text=True, timeout=timeout,
        env={**os.environ, "REVVOLNET_THREADS": "1"},
    )
    return proc


def first_json(text):
    return json.JSONDecoder().raw_decode(text)[0]


@pytest.fixture
def tiny_spec(tmp_path):
    path = tmp_path / "tiny.spec"
    path.write_text(TINY_SPEC)
    return str(path)


class TestGradcheck:
    def test_default_run_passes(self):
        proc = run_cli("gradcheck", "--seed", "0", "--depth", "3")
        assert proc.returncode == 0, proc.stderr
        doc = first_json(proc.stdout)
        assert doc["pass"] is True
        assert doc["sequence"]["worst_rel_error"] <= 1e-4
        assert sorted(doc) == SCHEMA["gradcheck"]
        for entry in doc["ops"].values():
            assert sorted(entry) == SCHEMA["gradcheck.ops_entry"]
        assert sorted(doc["sequence"]) == SCHEMA["gradcheck.sequence"]

    def test_depth_zero_identity_passes(self):
        proc = run_cli("gradcheck", "--depth", "0")
        assert proc.returncode == 0
        assert first_json(proc.stdout)["sequence"]["worst_rel_error"] == 0.0

    def test_injected_fault_detected_and_named(self):
        proc = run_cli("gradcheck", "--inject-fault", "conv3d")
        assert proc.returncode == 1
        doc = first_json(proc.stdout)
        assert doc["pass"] is False
        assert doc["ops"]["conv3d"]["pass"] is False
        assert "conv3d" in proc.stderr


class TestInvert:
    def test_trials_pass_within_tolerance(self):
        proc = run_cli("invert", "--trials", "25", "--seed", "1")
        assert proc.returncode == 0, proc.stderr
        doc = first_json(proc.stdout)
        assert sorted(doc) == SCHEMA["invert"]
        assert doc["max_abs_error"] <= 1e-4
        assert doc["pass"] is True


class TestEstimateMemory:
    def test_compare_shows_reversible_advantage(self, tmp_path):
        spec = tmp_path / "base.spec"
        spec.write_text(DESK_BASE_SPEC)
        proc = run_cli("estimate-memory", "--spec", str(spec),
                       "--input-shape", "16,16,16", "--compare")
        assert proc.returncode == 0, proc.stderr
        doc = first_json(proc.stdout)
        assert sorted(doc) == SCHEMA["estimate-memory"]
        assert sorted(doc["compare"]) == SCHEMA["estimate-memory.compare"]
        assert sorted(doc["terms"][0]) == SCHEMA["estimate-memory.term"]
        cmp = doc["compare"]
        assert cmp["reversible_total_bytes"] < cmp["baseline_total_bytes"]
        # the plain-text table follows the JSON document
        assert "M_A bytes" in proc.stdout

    def test_measure_appends_peak(self, tiny_spec):
        proc = run_cli("estimate-memory", "--spec", tiny_spec,
                       "--input-shape", "8,8,8", "--measure", "--compare")
        assert proc.returncode == 0, proc.stderr
        doc = first_json(proc.stdout)
        assert doc["measured_peak_bytes"] > 0

    def test_schema_stable_across_runs(self, tmp_path):
        spec = tmp_path / "base.spec"
        spec.write_text(DESK_BASE_SPEC)
        docs = []
        for _ in range(2):
            proc = run_cli("estimate-memory", "--spec", str(spec),
                           "--input-shape", "8,8,8", "--compare")
            docs.append(first_json(proc.stdout))

        def keyset(doc, prefix=""):
            keys = set()
            for k, v in doc.items():
                keys.add(prefix + k)
                if isinstance(v, dict):
                    keys |= keyset(v, prefix + k + ".")
            return keys

        assert keyset(docs[0]) == keyset(docs[1])

    def test_bad_spec_is_usage_error(self, tmp_path):
        spec = tmp_path / "broken.spec"
        spec.write_text("levels=\n")
        proc = run_cli("estimate-memory", "--spec", str(spec))
        assert proc.returncode == 2
        assert proc.stderr.strip()

    def test_missing_spec_file_is_usage_error(self):
        proc = run_cli("estimate-memory", "--spec", "/nonexistent/arch.spec")
        assert proc.returncode == 2


class TestTrainEval:
    def test_synthetic_train_writes_outputs(self, tmp_path, tiny_spec):
        cfg = tmp_path / "train.cfg"
        cfg.write_text(FAST_CONFIG)
        out = tmp_path / "run"
        proc = run_cli("train", "--spec", tiny_spec, "--config", str(cfg),
                       "--synthetic", "6", "--size", "12", "--out", str(out))
        assert proc.returncode == 0, proc.stderr
        doc = first_json(proc.stdout)
        assert sorted(doc) == SCHEMA["train"]
        with open(out / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        epochs = [int(r["epoch"]) for r in rows]
        assert epochs == sorted(epochs) == list(range(len(rows)))
        for suffix in (".rvt", ".manifest", ".arch"):
            assert (out / f"checkpoint_best{suffix}").exists()
            assert (out / f"checkpoint_final{suffix}").exists()

        eval_proc = run_cli("eval", "--checkpoint", str(out / "checkpoint_best"),
                            "--synthetic", "4", "--size", "12", "--seed", "3")
        assert eval_proc.returncode == 0, eval_proc.stderr
        eval_doc = first_json(eval_proc.stdout)
        assert sorted(eval_doc) == SCHEMA["eval"]
        assert set(eval_doc["mean_dice"]) == {"wt", "tc", "et"}

    def test_dataset_directory_round_trip(self, tmp_path, tiny_spec):
        import numpy as np

        from revvolnet.training import generate_synthetic, save_dataset

        rng = np.random.default_rng(0)
        save_dataset([generate_synthetic(rng, size=12) for _ in range(4)],
                     tmp_path / "data")
        cfg = tmp_path / "train.cfg"
        cfg.write_text(FAST_CONFIG)
        out = tmp_path / "run"
        proc = run_cli("train", "--spec", tiny_spec, "--config", str(cfg),
                       "--data", str(tmp_path / "data"), "--out", str(out))
        assert proc.returncode == 0, proc.stderr


class TestBench:
    def test_reports_ratio(self, tiny_spec):
        proc = run_cli("bench", "--spec", tiny_spec, "--steps", "2",
                       "--input-shape", "8,8,8")
        assert proc.returncode == 0, proc.stderr
        doc = first_json(proc.stdout)
        assert sorted(doc) == SCHEMA["bench"]
        assert doc["time_ratio"] > 0
        assert doc["reversible"]["peak_bytes"] > 0


class TestUsage:
    def test_unknown_command_exits_two(self):
        proc = run_cli("frobnicate")
        assert proc.returncode == 2

    def test_missing_required_flag_exits_two(self):
        proc = run_cli("train", "--synthetic", "3", "--out", "/tmp/x")
        assert proc.returncode == 2

    def test_same_seed_same_gradcheck_json(self):
        a = run_cli("gradcheck", "--seed", "5").stdout
        b = run_cli("gradcheck", "--seed", "5").stdout
        assert a == b
