import os
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

from stage_world.config import SynthConfig, save_run_config


def _run_cli(*args: str) -> subprocess.CompletedProcess:
    repo_root = Path(__file__).resolve().parents[1]
    return subprocess.run(
        [sys.executable, "-m", "stage_world", *args],
        cwd=repo_root,
        capture_output=True,
        text=True,
        check=False,
    )


def test_cli_synth_train_generate_smoke(tmp_path, small_config):
    config = replace(small_config, synth=SynthConfig(train_scenes=1, eval_scenes=1, n_frames=4))
    save_run_config(config, tmp_path)
    common = ("--workdir", str(tmp_path), "--config", "run-config.json")

    synth = _run_cli("synth", *common)
    assert synth.returncode == 0, synth.stderr
    assert "wrote 1 train scenes" in synth.stdout

    train = _run_cli("train", *common, "--stage", "1", "--steps", "2")
    assert train.returncode == 0, train.stderr
    assert "stage 1: 2 steps" in train.stdout

    generate = _run_cli("generate", *common, "--checkpoint", "runs/stage1/model", "--frames", "2")
    assert generate.returncode == 0, generate.stderr
    assert "report:" in generate.stdout
    assert (tmp_path / "runs" / "generate" / "report.md").exists()


def test_cli_gradcheck_subset(tmp_path):
    result = _run_cli("gradcheck", "--workdir", str(tmp_path), "--only", "add", "matmul")
    assert result.returncode == 0, result.stderr
    assert "| add" in result.stdout
    assert "FAILED" not in result.stderr


def test_cli_later_stage_without_init_is_usage_error(tmp_path):
    result = _run_cli("train", "--workdir", str(tmp_path), "--stage", "2")
    assert result.returncode == 2
    assert "--init is required" in result.stderr


def test_cli_reports_missing_checkpoint(tmp_path):
    result = _run_cli("generate", "--workdir", str(tmp_path), "--checkpoint", "missing/model")
    assert result.returncode == 1
    assert result.stderr.startswith("error:")


def test_cli_rejects_bad_seed_env(tmp_path):
    repo_root = Path(__file__).resolve().parents[1]
    result = subprocess.run(
        [sys.executable, "-m", "stage_world", "gradcheck", "--workdir", str(tmp_path), "--only", "add"],
        cwd=repo_root,
        capture_output=True,
        text=True,
        check=False,
        env={**os.environ, "STAGE_SEED": "not-a-number"},
    )
    assert result.returncode == 1
    assert "STAGE_SEED" in result.stderr
