from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from stage_world import numerics as nx
from stage_world.artifacts import read_latents, read_pgm
from stage_world.denoiser import TrainingError
from stage_world.pipeline import PipelineError
from stage_world.runner import cmd_generate, cmd_gradcheck, cmd_synth, cmd_train, load_denoiser
from stage_world.synthdata import read_dataset
from stage_world.tracing import read_trace
from conftest import small_unet_config


def _event_types(path: Path):
    return [entry["event_type"] for entry in read_trace(path)]


@pytest.fixture
def trained(tmp_path, small_config):
    """Synthesized data plus stage-1 and stage-2 checkpoints."""
    cmd_synth(small_config, tmp_path)
    first = cmd_train(small_config, 1, tmp_path, steps=3)
    second = cmd_train(small_config, 2, tmp_path, init=first.checkpoint_path, steps=4)
    return first, second


def test_synth_writes_both_splits(tmp_path, small_config):
    result = cmd_synth(small_config, tmp_path)
    assert (result.train_path / "meta.json").exists()
    assert (result.eval_path / "latents.bin").exists()
    assert (result.train_path / "frames.bin").exists()
    scenes = read_dataset(result.train_path)
    assert len(scenes) == 1
    assert scenes[0].n_frames == small_config.synth.n_frames
    events = _event_types(tmp_path / "data" / "trace.jsonl")
    assert events[0] == "config"
    assert events.count("synth_scene") == 2


def test_synth_can_skip_frames(tmp_path, small_config):
    config = replace(small_config, synth=replace(small_config.synth, store_frames=False))
    result = cmd_synth(config, tmp_path / "bare")
    assert not (result.train_path / "frames.bin").exists()
    stored = cmd_synth(small_config, tmp_path / "stored")
    rendered = read_dataset(result.train_path)[0]
    np.testing.assert_allclose(rendered.frames, read_dataset(stored.train_path)[0].frames, atol=1e-6)


def test_synth_is_seeded(tmp_path, small_config):
    cmd_synth(small_config, tmp_path / "a")
    cmd_synth(small_config, tmp_path / "b")
    first = read_dataset(tmp_path / "a" / "data" / "train")[0]
    second = read_dataset(tmp_path / "b" / "data" / "train")[0]
    np.testing.assert_array_equal(first.latents, second.latents)


def test_training_artifacts(trained):
    first, second = trained
    for run in (first, second):
        assert run.checkpoint_path.with_suffix(".bin").exists()
        assert (run.run_dir / "run-config.json").exists()
        assert (run.run_dir / "charts" / "loss_1.png").exists()
    assert len(first.loss_path.read_text().splitlines()) == 1 + 3
    assert first.loss_path.read_text().splitlines()[0] == "step,loss,lr,stage"
    events = _event_types(first.run_dir / "trace.jsonl")
    assert {"config", "stage_start", "train_step", "stage_end", "train", "checkpoint_saved", "chart_saved"} <= set(events)


def test_stage_two_checkpoint_keeps_backbone(trained, small_config):
    first, second = trained
    before = load_denoiser(first.checkpoint_path, small_config)
    after = load_denoiser(second.checkpoint_path, small_config)
    for name in before.backbone_parameter_names():
        np.testing.assert_array_equal(after.params[name].data, before.params[name].data)
    _, meta = nx.load_checkpoint(second.checkpoint_path)
    assert meta["stage"] == 2
    assert meta["steps"] == 4


def test_later_stages_need_init(tmp_path, small_config):
    cmd_synth(small_config, tmp_path)
    with pytest.raises(TrainingError):
        cmd_train(small_config, 3, tmp_path, steps=1)
    assert "error" in _event_types(tmp_path / "runs" / "stage3" / "trace.jsonl")


def test_generate_writes_latents_frames_and_report(trained, tmp_path, small_config):
    _, second = trained
    result = cmd_generate(small_config, second.checkpoint_path, tmp_path, dump_frames="frames")

    n_frames = small_config.generate.frames
    assert result.latents.shape == (n_frames,) + small_config.unet.latent_shape
    np.testing.assert_array_equal(read_latents(result.run_dir / "latents"), result.latents)
    assert [path.name for path in result.frame_paths] == [f"frame_{i:04d}.pgm" for i in range(1, n_frames + 1)]
    assert read_pgm(result.frame_paths[0]).shape == (128, 128)
    assert result.report_path.exists()
    assert result.metrics.summary()["frames"] == n_frames
    assert len(result.metrics.psnr) == n_frames
    events = _event_types(result.run_dir / "trace.jsonl")
    assert events.count("frame_generated") == n_frames
    assert events[-1] == "report_written"


def test_generation_is_reproducible(trained, tmp_path, small_config):
    _, second = trained
    first = cmd_generate(small_config, second.checkpoint_path, tmp_path, out="runs/a")
    again = cmd_generate(small_config, second.checkpoint_path, tmp_path, out="runs/b")
    np.testing.assert_array_equal(first.latents, again.latents)


def test_extra_draws_are_saved(trained, tmp_path, small_config):
    _, second = trained
    result = cmd_generate(small_config, second.checkpoint_path, tmp_path, draws=2, eval_short=True)
    assert (result.run_dir / "latents_draw1.bin").exists()


def test_generation_past_ground_truth_needs_infinite(trained, tmp_path, small_config):
    _, second = trained
    too_many = small_config.synth.n_frames + 2
    with pytest.raises(PipelineError, match="--infinite"):
        cmd_generate(small_config, second.checkpoint_path, tmp_path, frames=too_many)

    result = cmd_generate(small_config, second.checkpoint_path, tmp_path, frames=too_many, infinite=True)
    assert result.latents.shape[0] == too_many
    assert len(result.metrics.psnr) == small_config.synth.n_frames - 1


def test_checkpoint_config_mismatch(trained, tmp_path, small_config):
    first, _ = trained
    other = replace(small_config, unet=replace(small_unet_config(), base_channels=8))
    with pytest.raises(nx.CheckpointError, match="mismatch"):
        cmd_generate(other, first.checkpoint_path, tmp_path)


def test_missing_checkpoint(tmp_path, small_config):
    cmd_synth(small_config, tmp_path)
    with pytest.raises(nx.CheckpointError):
        cmd_generate(small_config, tmp_path / "nowhere" / "model", tmp_path)


def test_gradcheck_writes_csv(tmp_path, small_config):
    report = cmd_gradcheck(small_config, tmp_path, only=["add", "conv2d"])
    assert report.passed
    lines = (tmp_path / "runs" / "gradcheck" / "gradcheck.csv").read_text().splitlines()
    assert lines[0] == "op,max_rel_err,worst_param,passed"
    assert len(lines) == 3
