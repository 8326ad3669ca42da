from dataclasses import replace
from pathlib import Path
import sys

import pytest


sys.path.append(str(Path(__file__).resolve().parents[1]))

from stage_world.config import GenerateConfig, RunConfig, ScheduleConfig, SynthConfig, TrainConfig  # noqa: E402
from stage_world.denoiser import UNetConfig  # noqa: E402
from stage_world.synthdata import gen_scene, random_scene_spec  # noqa: E402


def small_unet_config() -> UNetConfig:
    """Smallest network that runs on the 32x32 dataset latents."""
    return UNetConfig(
        latent_channels=1,
        latent_height=32,
        latent_width=32,
        base_channels=4,
        channel_mults=(1, 2),
        token_dim=8,
        embed_dim=8,
        groups=2,
        anchor_patch=8,
        fusion_sites=("mid", "up0"),
    )


@pytest.fixture
def small_config() -> RunConfig:
    return replace(
        RunConfig(),
        schedule=ScheduleConfig(n_steps=3),
        unet=small_unet_config(),
        train=TrainConfig(steps=4, log_every=1),
        synth=SynthConfig(train_scenes=1, eval_scenes=1, n_frames=5),
        generate=GenerateConfig(frames=3, draws=1, refresh_every=2),
    ).validate()


@pytest.fixture(scope="session")
def tiny_scene():
    return gen_scene(random_scene_spec(3, 6))
