from dataclasses import replace

import numpy as np
import pytest

from stage_world import geometry as geo
from stage_world import numerics as nx
from stage_world.config import AugmentConfig, StreamConfig
from stage_world.denoiser import Denoiser
from stage_world.pipeline import (
    OracleDenoiser,
    PipelineError,
    StageTrainer,
    StreamGenerator,
    StreamingSampler,
    augment_condition,
    frame_conditions,
    infer_condition_latents,
    infinite_generate,
    predict_next_conditions,
    predicted_conditions,
    scene_conditions,
    stream_generate,
)
from stage_world.scheduler import edm_sigmas
from stage_world.synthdata import DT, AgentSpec, SceneSpec, WorldState, lane_layout
from stage_world.tracing import TraceLogger


def _model(config):
    return Denoiser.initialize(config.unet, seed=config.seed, selection=config.stream.selection())


def _static_state(speed=0.0):
    box = geo.Box3D(center=(15.0, 0.0, 0.75), size=(4.5, 1.8, 1.5))
    spec = SceneSpec(seed=0, n_frames=4, ego_speed=speed, lanes=lane_layout(3), agents=(AgentSpec(box=box, speed=speed),))
    return WorldState.initial(spec)


def test_zero_frames_gives_empty_sequence(tiny_scene):
    oracle = OracleDenoiser(tiny_scene.latents)
    out = stream_generate(tiny_scene.latents[0], [], 0, oracle, edm_sigmas(4))
    assert out.shape == (0,) + tiny_scene.latents.shape[1:]


def test_oracle_reproduces_ground_truth(tiny_scene):
    conditions = scene_conditions(tiny_scene)[1:]
    oracle = OracleDenoiser(tiny_scene.latents)
    out = stream_generate(tiny_scene.latents[0], conditions, 5, oracle, edm_sigmas(6))
    np.testing.assert_allclose(out, tiny_scene.latents[1:6], atol=1e-4)


def test_running_out_of_conditions_fails(tiny_scene):
    conditions = scene_conditions(tiny_scene)[1:3]
    with pytest.raises(PipelineError):
        stream_generate(tiny_scene.latents[0], conditions, 3, OracleDenoiser(tiny_scene.latents), edm_sigmas(4))


def test_generation_is_causal(tiny_scene, small_config):
    model = _model(small_config)
    schedule = small_config.schedule.build()
    conditions = scene_conditions(tiny_scene)[1:]
    short = stream_generate(tiny_scene.latents[0], conditions, 2, model, schedule, small_config.stream, seed=4)
    long = stream_generate(tiny_scene.latents[0], conditions, 4, model, schedule, small_config.stream, seed=4)
    np.testing.assert_array_equal(long[:2], short)


def test_fresh_start_after_another_scene_is_identical(tiny_scene, small_config):
    model = _model(small_config)
    generator = StreamGenerator(model, small_config.schedule.build(), small_config.stream)
    conditions = scene_conditions(tiny_scene)[1:]
    alone = generator.run(tiny_scene.latents[0], conditions, 3, seed=1).latents
    generator.run(tiny_scene.latents[2], conditions, 3, seed=9)
    again = generator.run(tiny_scene.latents[0], conditions, 3, seed=1).latents
    np.testing.assert_array_equal(alone, again)


def test_buffer_memory_stops_growing_at_capacity(tiny_scene, small_config):
    model = _model(small_config)
    stream = StreamConfig(capacity=2, offsets=(-1, -2))
    output = StreamGenerator(model, small_config.schedule.build(), stream).run(
        tiny_scene.latents[0], scene_conditions(tiny_scene)[1:], 5
    )
    assert output.buffer_bytes[0] > 0
    assert len(set(output.buffer_bytes[1:])) == 1
    assert output.buffer_bytes[1] == 2 * output.buffer_bytes[0]
    assert len(output.frame_ms) == 5


def test_disabled_fusion_keeps_no_buffers(tiny_scene, small_config):
    model = _model(small_config)
    stream = replace(small_config.stream, fusion_enabled=False)
    output = StreamGenerator(model, small_config.schedule.build(), stream).run(
        tiny_scene.latents[0], scene_conditions(tiny_scene)[1:], 2
    )
    assert output.buffer_bytes == [0, 0]


def test_ground_truth_refresh_uses_given_latent(tiny_scene):
    calls = []

    class Recorder(OracleDenoiser):
        def __call__(self, x_t, sigma, cond, buffers, step_index, time_index):
            calls.append((time_index, cond.cond_latent.copy()))
            return super().__call__(x_t, sigma, cond, buffers, step_index, time_index)

    gt = tiny_scene.latents + 0.25
    stream_generate(
        tiny_scene.latents[0],
        scene_conditions(tiny_scene)[1:],
        3,
        Recorder(tiny_scene.latents),
        edm_sigmas(2),
        gt_latents=gt,
        gt_refresh_every=2,
    )
    by_frame = {time_index: latent for time_index, latent in calls}
    np.testing.assert_array_equal(by_frame[1], gt[0])
    np.testing.assert_allclose(by_frame[2], tiny_scene.latents[1], atol=1e-6)
    np.testing.assert_array_equal(by_frame[3], gt[2])


def test_full_band_augmentation_is_identity():
    rng = nx.make_rng(0, "augment")
    latent = rng.normal(0.0, 1.0, (1, 8, 8)).astype(np.float32)
    config = AugmentConfig(keep_range=(1.0, 1.0), cond_dropout_p=0.0, cond_noise_sigma=0.0)
    np.testing.assert_allclose(augment_condition(latent, config, rng), latent, atol=1e-5)


def test_dc_only_augmentation_gives_channel_mean():
    rng = nx.make_rng(1, "augment")
    latent = rng.normal(0.0, 1.0, (2, 8, 8)).astype(np.float32)
    config = AugmentConfig(cond_dropout_p=0.0, cond_noise_sigma=0.0)
    out = augment_condition(latent, config, rng, keep_fraction=0.0)
    for channel in range(2):
        np.testing.assert_allclose(out[channel], latent[channel].astype(np.float64).mean(), atol=1e-5)


def test_filtering_never_adds_energy():
    rng = nx.make_rng(2, "augment")
    config = AugmentConfig(cond_dropout_p=0.0, cond_noise_sigma=0.0)
    for _ in range(5):
        latent = rng.normal(0.0, 1.0, (1, 8, 8)).astype(np.float32)
        out = augment_condition(latent, config, rng)
        assert float(np.sum(out.astype(np.float64) ** 2)) <= float(np.sum(latent.astype(np.float64) ** 2)) + 1e-4


def test_augmentation_is_seeded():
    latent = nx.make_rng(3, "latent").normal(0.0, 1.0, (1, 8, 8)).astype(np.float32)
    config = AugmentConfig(cond_dropout_p=0.5)
    first = augment_condition(latent, config, nx.make_rng(4, "augment"))
    second = augment_condition(latent, config, nx.make_rng(4, "augment"))
    np.testing.assert_array_equal(first, second)


def test_static_world_predicts_same_conditions():
    state = _static_state()
    rig = geo.default_rig()
    following, predicted = predict_next_conditions(state, rig)
    current = frame_conditions(state.ego, state.boxes, state.lanes, rig)
    np.testing.assert_array_equal(predicted.raster, current.raster)
    np.testing.assert_allclose(predicted.weight_map.values, current.weight_map.values)
    assert following.frame_index == 1


def test_predicted_centres_follow_euler_kinematics():
    state = _static_state(speed=6.0)
    following, _ = predict_next_conditions(state, geo.default_rig())
    assert following.boxes[0].center[0] == pytest.approx(15.0 + 6.0 * DT, abs=1e-6)
    assert following.ego.x == pytest.approx(6.0 * DT, abs=1e-6)


def test_approaching_box_grows_in_view():
    rig = geo.default_rig()
    box = geo.Box3D(center=(10.0, 0.0, 0.75), size=(4.5, 1.8, 1.5))
    far = geo.project_box_hull(box, geo.Pose(x=0.0), rig.ego_to_camera, rig.intrinsics)
    near = geo.project_box_hull(box, geo.Pose(x=1.0), rig.ego_to_camera, rig.intrinsics)
    assert geo.polygon_area(near) > geo.polygon_area(far)


def test_extrapolated_conditions_match_linear_scenes(tiny_scene):
    ground_truth = scene_conditions(tiny_scene)[1:]
    predicted = predicted_conditions(tiny_scene.state_at(0), tiny_scene.rig)
    for expected, actual in zip(ground_truth, predicted):
        np.testing.assert_allclose(actual.raster, expected.raster, atol=1e-3)


def test_infinite_generation_runs_past_ground_truth(tiny_scene, small_config):
    model = _model(small_config)
    output = infinite_generate(
        tiny_scene.latents[0],
        tiny_scene.state_at(0),
        tiny_scene.n_frames + 2,
        model,
        small_config.schedule.build(),
        tiny_scene.rig,
        small_config.stream,
    )
    assert output.latents.shape[0] == tiny_scene.n_frames + 2
    assert np.isfinite(output.latents).all()


def test_sampler_is_chronological(tiny_scene):
    sampler = StreamingSampler([tiny_scene, tiny_scene], edm_sigmas(4), nx.make_rng(0, "sampler"))
    passes = list(sampler.epoch())
    assert sorted(p.scene_index for p in passes) == [0, 1]
    for scene_pass in passes:
        assert scene_pass.frame_indices == tuple(range(1, tiny_scene.n_frames))
        assert edm_sigmas(4).sigma_min <= scene_pass.sigma <= edm_sigmas(4).sigma_max
        assert scene_pass.step_index is None


def test_discrete_sampler_picks_a_schedule_step(tiny_scene):
    schedule = edm_sigmas(4)
    sampler = StreamingSampler([tiny_scene] * 6, schedule, nx.make_rng(0, "sampler"), discrete=True)
    for scene_pass in sampler.epoch():
        assert 0 <= scene_pass.step_index < schedule.n_steps
        assert scene_pass.sigma == pytest.approx(float(schedule.sigmas[scene_pass.step_index]))
        assert scene_pass.sigma > 0.0


def test_sampler_needs_scenes():
    with pytest.raises(PipelineError):
        StreamingSampler([], edm_sigmas(4), nx.make_rng(0, "sampler"))


def test_inferred_condition_latents_keep_anchor(tiny_scene, small_config):
    model = _model(small_config)
    inferred = infer_condition_latents(
        tiny_scene, scene_conditions(tiny_scene), model, small_config.schedule.build(), small_config.stream
    )
    assert inferred.shape == tiny_scene.latents.shape
    np.testing.assert_array_equal(inferred[0], tiny_scene.latents[0])

    oracle = infer_condition_latents(
        tiny_scene, scene_conditions(tiny_scene), OracleDenoiser(tiny_scene.latents), edm_sigmas(3)
    )
    np.testing.assert_allclose(oracle, tiny_scene.latents, atol=1e-4)


def test_stage_one_trains_backbone_only(tiny_scene, small_config, tmp_path):
    model = _model(small_config)
    fusion = {name: model.params[name].data.copy() for name in model.fusion_parameter_names()}
    before = model.params["input.weight"].data.copy()
    trace = TraceLogger(path=str(tmp_path / "trace.jsonl"))

    result = StageTrainer(model, [tiny_scene], small_config, trace).run(1, steps=4)

    assert [record.step for record in result.losses] == [1, 2, 3, 4]
    assert all(record.stage == 1 for record in result.losses)
    for name, value in fusion.items():
        np.testing.assert_array_equal(model.params[name].data, value)
    assert not np.array_equal(model.params["input.weight"].data, before)
    assert trace.count("stage_start") == 1
    assert trace.count("stage_end") == 1
    assert trace.count("train_step") == 4


def test_stage_two_freezes_backbone_and_fixes_step(tiny_scene, small_config):
    model = _model(small_config)
    backbone = {name: model.params[name].data.copy() for name in model.backbone_parameter_names()}
    frames_per_pass = tiny_scene.n_frames - 1

    result = StageTrainer(model, [tiny_scene], small_config).run(2, steps=2 * frames_per_pass)

    for name, value in backbone.items():
        np.testing.assert_array_equal(model.params[name].data, value)
    assert len(result.emitted_steps) == 2
    assert all(len(steps) == 1 for steps in result.emitted_steps)
    for hits in result.cache_hits:
        assert hits == {site: frames_per_pass - 1 for site in small_config.unet.fusion_sites}
    assert result.inference_passes == 0


def test_stage_three_runs_one_inference_pass_per_sequence(tiny_scene, small_config, tmp_path):
    model = _model(small_config)
    before = model.params["input.weight"].data.copy()
    frames_per_pass = tiny_scene.n_frames - 1
    trace = TraceLogger(path=str(tmp_path / "trace.jsonl"))

    result = StageTrainer(model, [tiny_scene], small_config, trace).run(3, steps=2 * frames_per_pass)

    assert result.inference_passes == 2
    assert trace.count("inference_pass") == 2
    assert all(gap > 0 for gap in result.cond_gaps)
    assert all(record.lr == pytest.approx(small_config.train.base_lr / 5) for record in result.losses)
    assert not np.array_equal(model.params["input.weight"].data, before)


def test_training_is_reproducible(tiny_scene, small_config):
    first = StageTrainer(_model(small_config), [tiny_scene], small_config).run(1, steps=3)
    second = StageTrainer(_model(small_config), [tiny_scene], small_config).run(1, steps=3)
    assert [r.loss for r in first.losses] == [r.loss for r in second.losses]


def test_unknown_stage_is_rejected(tiny_scene, small_config):
    with pytest.raises(PipelineError):
        StageTrainer(_model(small_config), [tiny_scene], small_config).run(4, steps=1)
