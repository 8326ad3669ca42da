"""Streaming generation, condition augmentation, staged training and infinite rollout."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Protocol, Sequence, Set, Tuple

import numpy as np

from stage_world import geometry as geo
from stage_world import htft
from stage_world import numerics as nx
from stage_world.config import AugmentConfig, LossWeightConfig, RunConfig, StreamConfig
from stage_world.denoiser import (
    ConditionPack,
    Denoiser,
    TrainBatch,
    anchor_tokens_from_latent,
    train_step,
)
from stage_world.scheduler import NoiseSchedule, log_uniform_sigma, sampler_step
from stage_world.synthdata import LATENT_FACTOR, SceneSequence, WorldState, advance
from stage_world.tracing import TraceLogger


class PipelineError(RuntimeError):
    """Raised when generation runs out of conditions or gets inconsistent inputs."""


@dataclass(frozen=True, eq=False)
class FrameConditions:
    raster: np.ndarray
    weight_map: geo.WeightMap


class DenoiseFn(Protocol):
    fusion_sites: Tuple[str, ...]
    anchor_patch: int

    def __call__(
        self,
        x_t: np.ndarray,
        sigma: float,
        cond: ConditionPack,
        buffers: Optional[Mapping[str, htft.StreamingBuffer2D]],
        step_index: int,
        time_index: int,
    ) -> Tuple[np.ndarray, Dict[str, htft.FeatureFrame]]:
        ...


class OracleDenoiser:
    """Returns the ground-truth latent of the frame being generated."""

    fusion_sites: Tuple[str, ...] = ()
    anchor_patch: int = 4

    def __init__(self, gt_latents: np.ndarray) -> None:
        self.gt_latents = np.asarray(gt_latents, dtype=np.float32)

    def __call__(self, x_t, sigma, cond, buffers, step_index, time_index):
        return self.gt_latents[time_index].copy(), {}


class NetworkDenoiser:
    """Adapts a Denoiser to the streaming protocol."""

    def __init__(self, denoiser: Denoiser) -> None:
        self.denoiser = denoiser
        self.fusion_sites = denoiser.config.fusion_sites
        self.anchor_patch = denoiser.config.anchor_patch

    def __call__(self, x_t, sigma, cond, buffers, step_index, time_index):
        return self.denoiser(x_t, sigma, cond, buffers, step_index, time_index)


def as_denoise_fn(denoiser: Denoiser | DenoiseFn) -> DenoiseFn:
    return NetworkDenoiser(denoiser) if isinstance(denoiser, Denoiser) else denoiser


# conditions


def frame_conditions(
    ego: geo.Pose,
    boxes: Sequence[geo.Box3D],
    lanes: Sequence[geo.Polyline],
    rig: geo.CameraRig,
    weights: LossWeightConfig = LossWeightConfig(),
    latent_factor: int = LATENT_FACTOR,
) -> FrameConditions:
    """Raster and loss weights on the latent grid; hull areas are in latent pixels."""
    intrinsics = rig.latent_intrinsics(latent_factor)
    height, width = intrinsics.height, intrinsics.width
    raster = geo.rasterize_conditions(
        lanes, boxes, ego, rig.ego_to_camera, intrinsics, height, width, rig.z_near
    )
    if not weights.enabled:
        return FrameConditions(raster=raster, weight_map=geo.WeightMap.uniform(height, width))
    polygons = geo.visible_box_polygons(boxes, ego, rig.ego_to_camera, intrinsics, rig.z_near)
    weight_map = geo.weight_map([(polygon, area) for polygon, area, _ in polygons], height, width, weights.k, weights.c)
    return FrameConditions(raster=raster, weight_map=weight_map)


def scene_conditions(scene: SceneSequence, weights: LossWeightConfig = LossWeightConfig()) -> List[FrameConditions]:
    return [
        frame_conditions(pose, boxes, scene.lanes, scene.rig, weights)
        for pose, boxes in zip(scene.poses, scene.boxes)
    ]


def predict_next_conditions(
    state: WorldState,
    rig: geo.CameraRig,
    weights: LossWeightConfig = LossWeightConfig(),
) -> Tuple[WorldState, FrameConditions]:
    """Constant-velocity, constant-yaw-rate extrapolation of ego and agents, re-projected."""
    following = advance(state)
    return following, frame_conditions(following.ego, following.boxes, following.lanes, rig, weights)


def predicted_conditions(
    initial: WorldState,
    rig: geo.CameraRig,
    weights: LossWeightConfig = LossWeightConfig(),
) -> Iterator[FrameConditions]:
    """Endless stream of conditions for frames 1, 2, ... chained from ``initial``."""
    state = initial
    while True:
        state, conditions = predict_next_conditions(state, rig, weights)
        yield conditions


def augment_condition(
    cond_latent: np.ndarray,
    config: AugmentConfig,
    rng: np.random.Generator,
    keep_fraction: Optional[float] = None,
) -> np.ndarray:
    """Low-pass the condition latent in the DCT domain, maybe drop it, then add noise.

    The rng is consumed identically whatever the outcome.
    """
    drawn_keep = rng.uniform(*config.keep_range)
    drop = rng.random() < config.cond_dropout_p
    noise = rng.standard_normal(cond_latent.shape) * config.cond_noise_sigma
    keep = drawn_keep if keep_fraction is None else keep_fraction
    _, height, width = cond_latent.shape
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    radius = np.sqrt(rows * rows + cols * cols)
    max_radius = math.sqrt((height - 1) ** 2 + (width - 1) ** 2)
    mask = radius <= keep * max_radius
    filtered = np.stack(
        [nx.idct2(nx.Tensor(nx.dct2(nx.Tensor(channel)).data * mask)).data for channel in cond_latent]
    )
    if drop:
        filtered = np.zeros_like(filtered)
    return (filtered + noise).astype(np.float32)


# streaming generation


@dataclass
class GenerationState:
    frame_index: int
    buffers: Optional[Dict[str, htft.StreamingBuffer2D]]
    last_latent: np.ndarray
    anchor_latent: np.ndarray


@dataclass
class GenerationOutput:
    latents: np.ndarray
    frame_ms: List[float] = field(default_factory=list)
    buffer_bytes: List[int] = field(default_factory=list)


class StreamGenerator:
    """Frame-by-frame sampler owning one GenerationState."""

    def __init__(
        self,
        denoiser: Denoiser | DenoiseFn,
        schedule: NoiseSchedule,
        stream: StreamConfig = StreamConfig(),
    ) -> None:
        self.denoiser = as_denoise_fn(denoiser)
        self.schedule = schedule
        self.stream = stream

    def start(self, initial_latent: np.ndarray) -> GenerationState:
        initial = np.asarray(initial_latent, dtype=np.float32)
        buffers = None
        if self.stream.fusion_enabled and self.denoiser.fusion_sites:
            buffers = htft.make_buffers(self.denoiser.fusion_sites, self.schedule.n_steps, self.stream.capacity)
        return GenerationState(frame_index=0, buffers=buffers, last_latent=initial, anchor_latent=initial)

    def step(
        self,
        state: GenerationState,
        conditions: FrameConditions,
        seed: int,
        cond_latent: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Generate frame ``state.frame_index + 1`` from pure noise through every denoising step."""
        time_index = state.frame_index + 1
        rng = nx.make_rng(seed, "frame", time_index)
        pack = ConditionPack(
            cond_latent=state.last_latent if cond_latent is None else np.asarray(cond_latent, dtype=np.float32),
            anchor_tokens=anchor_tokens_from_latent(state.anchor_latent, self.denoiser.anchor_patch),
            raster=conditions.raster,
            weight_map=conditions.weight_map,
        )
        sigmas = self.schedule.sigmas
        x = (sigmas[0] * rng.standard_normal(state.anchor_latent.shape)).astype(np.float32)
        for step_index, sigma in enumerate(sigmas):
            x0_hat, emitted = self.denoiser(x, sigma, pack, state.buffers, step_index, time_index)
            if state.buffers is not None:
                for site, frame in emitted.items():
                    state.buffers[site].push(frame)
            x = sampler_step(x, x0_hat, sigma, self.schedule.next_sigma(step_index))
        state.frame_index = time_index
        state.last_latent = x
        return x

    def run(
        self,
        initial_latent: np.ndarray,
        conditions: Iterable[FrameConditions],
        n_frames: int,
        seed: int = 0,
        gt_latents: Optional[np.ndarray] = None,
        gt_refresh_every: Optional[int] = None,
        on_frame: Optional[Callable[[int, np.ndarray], None]] = None,
    ) -> GenerationOutput:
        state = self.start(initial_latent)
        source = iter(conditions)
        latents: List[np.ndarray] = []
        output = GenerationOutput(latents=np.zeros((0,) + state.anchor_latent.shape, dtype=np.float32))
        for time_index in range(1, n_frames + 1):
            try:
                current = next(source)
            except StopIteration:
                raise PipelineError(f"no conditions for frame {time_index}") from None
            cond_latent = None
            if gt_refresh_every and gt_latents is not None and (time_index - 1) % gt_refresh_every == 0:
                cond_latent = gt_latents[time_index - 1]
            start = time.perf_counter()
            latent = self.step(state, current, seed, cond_latent)
            output.frame_ms.append((time.perf_counter() - start) * 1000.0)
            output.buffer_bytes.append(htft.buffer_memory(state.buffers) if state.buffers else 0)
            latents.append(latent)
            if on_frame is not None:
                on_frame(time_index, latent)
        if latents:
            output.latents = np.stack(latents)
        return output


def stream_generate(
    initial_latent: np.ndarray,
    conditions: Iterable[FrameConditions],
    n_frames: int,
    denoiser: Denoiser | DenoiseFn,
    schedule: NoiseSchedule,
    stream: StreamConfig = StreamConfig(),
    seed: int = 0,
    gt_latents: Optional[np.ndarray] = None,
    gt_refresh_every: Optional[int] = None,
) -> np.ndarray:
    """Latents for frames 1..n_frames; ``conditions[i]`` conditions frame i + 1."""
    generator = StreamGenerator(denoiser, schedule, stream)
    return generator.run(initial_latent, conditions, n_frames, seed, gt_latents, gt_refresh_every).latents


def infinite_generate(
    initial_latent: np.ndarray,
    initial_state: WorldState,
    n_frames: int,
    denoiser: Denoiser | DenoiseFn,
    schedule: NoiseSchedule,
    rig: geo.CameraRig,
    stream: StreamConfig = StreamConfig(),
    weights: LossWeightConfig = LossWeightConfig(),
    seed: int = 0,
) -> GenerationOutput:
    generator = StreamGenerator(denoiser, schedule, stream)
    return generator.run(initial_latent, predicted_conditions(initial_state, rig, weights), n_frames, seed)


def infer_condition_latents(
    scene: SceneSequence,
    conditions: Sequence[FrameConditions],
    denoiser: Denoiser | DenoiseFn,
    schedule: NoiseSchedule,
    stream: StreamConfig = StreamConfig(),
    seed: int = 0,
) -> np.ndarray:
    """One inference pass over the scene; index 0 holds the anchor latent."""
    generated = stream_generate(
        scene.latents[0], conditions[1:], scene.n_frames - 1, denoiser, schedule, stream, seed
    )
    return np.concatenate([scene.latents[:1], generated]).astype(np.float32)


# training


@dataclass(frozen=True)
class ScenePass:
    scene_index: int
    sigma: float
    frame_indices: Tuple[int, ...]
    step_index: Optional[int] = None


class StreamingSampler:
    """Chronological frames per scene, one noise level per scene pass.

    Frame 0 is the anchor, so passes start at frame 1. With ``discrete`` the noise
    level is one of the schedule's sampling steps and ``step_index`` names it, so
    every frame of the pass reads and writes the same per-step buffer. Otherwise
    sigma is drawn log-uniformly and ``step_index`` is None.
    """

    def __init__(
        self,
        scenes: Sequence[SceneSequence],
        schedule: NoiseSchedule,
        rng: np.random.Generator,
        discrete: bool = False,
    ) -> None:
        if not scenes:
            raise PipelineError("training needs at least one scene")
        self.scenes = scenes
        self.schedule = schedule
        self.rng = rng
        self.discrete = discrete

    def scene_pass(self, scene_index: int) -> ScenePass:
        n_frames = self.scenes[scene_index].n_frames
        frame_indices = tuple(range(1, n_frames))
        if self.discrete:
            step_index = int(self.rng.integers(0, self.schedule.n_steps))
            sigma = float(self.schedule.sigmas[step_index])
            return ScenePass(scene_index, sigma, frame_indices, step_index)
        sigma = log_uniform_sigma(self.rng, self.schedule.sigma_min, self.schedule.sigma_max)
        return ScenePass(scene_index=scene_index, sigma=sigma, frame_indices=frame_indices)

    def epoch(self) -> Iterator[ScenePass]:
        for scene_index in self.rng.permutation(len(self.scenes)):
            yield self.scene_pass(int(scene_index))


@dataclass(frozen=True)
class LossRecord:
    step: int
    loss: float
    lr: float
    stage: int


@dataclass
class StageResult:
    stage: int
    losses: List[LossRecord] = field(default_factory=list)
    cache_hits: List[Dict[str, int]] = field(default_factory=list)
    emitted_steps: List[Set[int]] = field(default_factory=list)
    inference_passes: int = 0
    cond_gaps: List[float] = field(default_factory=list)


class StageTrainer:
    """Runs one training stage over a list of scenes."""

    def __init__(
        self,
        denoiser: Denoiser,
        scenes: Sequence[SceneSequence],
        config: RunConfig,
        trace: Optional[TraceLogger] = None,
    ) -> None:
        self.denoiser = denoiser
        self.scenes = scenes
        self.config = config
        self.trace = trace
        self.schedule = config.schedule.build()
        self.conditions = [scene_conditions(scene, config.loss_weights) for scene in scenes]
        self.optimizer = nx.AdamState()

    def _log(self, event_type: str, payload: Dict[str, object]) -> None:
        if self.trace is not None:
            self.trace.log(event_type, payload)

    def _condition_latent(self, latent: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if not self.config.augment.enabled:
            return latent
        return augment_condition(latent, self.config.augment, rng)

    def _batch(
        self,
        scene_index: int,
        frame_index: int,
        sigma: float,
        cond_latent: np.ndarray,
        rng: np.random.Generator,
        step_index: int = 0,
    ) -> TrainBatch:
        scene = self.scenes[scene_index]
        conditions = self.conditions[scene_index][frame_index]
        x0 = scene.latents[frame_index]
        pack = ConditionPack(
            cond_latent=self._condition_latent(cond_latent, rng),
            anchor_tokens=anchor_tokens_from_latent(scene.latents[0], self.denoiser.config.anchor_patch),
            raster=conditions.raster,
            weight_map=conditions.weight_map,
        )
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        return TrainBatch(
            x0=x0, sigma=sigma, eps=eps, cond=pack, step_index=step_index, time_index=frame_index
        )

    def _record(self, result: StageResult, loss: float, lr: float) -> None:
        step = len(result.losses) + 1
        result.losses.append(LossRecord(step=step, loss=loss, lr=lr, stage=result.stage))
        if step % self.config.train.log_every == 0 or step == 1:
            self._log("train_step", {"stage": result.stage, "step": step, "loss": loss, "lr": lr})

    def run(self, stage: int, steps: Optional[int] = None) -> StageResult:
        steps = self.config.train.steps if steps is None else steps
        self._log("stage_start", {"stage": stage, "steps": steps, "scenes": len(self.scenes)})
        if stage == 1:
            result = self._train_backbone(steps)
        elif stage in (2, 3):
            result = self._train_streaming(stage, steps)
        else:
            raise PipelineError(f"unknown training stage {stage}")
        final = result.losses[-1].loss if result.losses else None
        self._log("stage_end", {"stage": stage, "steps": len(result.losses), "final_loss": final})
        return result

    def _train_backbone(self, steps: int) -> StageResult:
        rng = nx.make_rng(self.config.seed, "stage", 1)
        sampler = StreamingSampler(self.scenes, self.schedule, rng)
        trainable = self.denoiser.backbone_parameter_names()
        lr = self.config.train.lr_for(1)
        result = StageResult(stage=1)
        while len(result.losses) < steps:
            for scene_pass in sampler.epoch():
                latents = self.scenes[scene_pass.scene_index].latents
                for frame_index in scene_pass.frame_indices:
                    if len(result.losses) >= steps:
                        return result
                    batch = self._batch(scene_pass.scene_index, frame_index, scene_pass.sigma, latents[frame_index - 1], rng)
                    outcome = train_step(self.denoiser, batch, self.optimizer, lr, trainable, buffers=None, rng=rng)
                    self._record(result, outcome.loss, lr)
        return result

    def _train_streaming(self, stage: int, steps: int) -> StageResult:
        """Fixed denoising step per sequence; features are cached once per frame into the buffers."""
        rng = nx.make_rng(self.config.seed, "stage", stage)
        sampler = StreamingSampler(self.scenes, self.schedule, rng, discrete=True)
        if stage == 2:
            trainable = self.denoiser.fusion_parameter_names()
        else:
            trainable = self.denoiser.params.names()
        lr = self.config.train.lr_for(stage)
        sites = self.denoiser.config.fusion_sites
        selection = self.config.stream.selection()
        result = StageResult(stage=stage)
        while len(result.losses) < steps:
            for scene_pass in sampler.epoch():
                if len(result.losses) >= steps:
                    return result
                scene_index = scene_pass.scene_index
                scene = self.scenes[scene_index]
                step_index = scene_pass.step_index
                sigma = scene_pass.sigma
                if stage == 3:
                    cond_latents = self._inferred_latents(scene_index, result, rng)
                else:
                    cond_latents = scene.latents
                buffers = (
                    htft.make_buffers(sites, self.schedule.n_steps, self.config.stream.capacity)
                    if self.config.stream.fusion_enabled
                    else None
                )
                hits = {site: 0 for site in sites}
                emitted_steps: Set[int] = set()
                for frame_index in scene_pass.frame_indices:
                    if len(result.losses) >= steps:
                        break
                    if buffers is not None:
                        for site in sites:
                            if htft.select_frames(buffers[site].step(step_index), selection):
                                hits[site] += 1
                    batch = self._batch(scene_index, frame_index, sigma, cond_latents[frame_index - 1], rng, step_index)
                    outcome = train_step(self.denoiser, batch, self.optimizer, lr, trainable, buffers=buffers, rng=rng)
                    if buffers is not None:
                        for site, frame in outcome.emitted.items():
                            buffers[site].push(frame)
                            emitted_steps.add(frame.step_index)
                    self._record(result, outcome.loss, lr)
                result.cache_hits.append(hits)
                result.emitted_steps.append(emitted_steps)
        return result

    def _inferred_latents(self, scene_index: int, result: StageResult, rng: np.random.Generator) -> np.ndarray:
        scene = self.scenes[scene_index]
        seed = int(rng.integers(0, 2**31 - 1))
        inferred = infer_condition_latents(
            scene, self.conditions[scene_index], self.denoiser, self.schedule, self.config.stream, seed
        )
        result.inference_passes += 1
        gap = float(np.mean(np.abs(inferred[1:] - scene.latents[1:])))
        result.cond_gaps.append(gap)
        self._log("inference_pass", {"scene": scene_index, "mean_gap": gap})
        return inferred


def train_stage1(denoiser: Denoiser, scenes: Sequence[SceneSequence], config: RunConfig, trace: Optional[TraceLogger] = None) -> StageResult:
    return StageTrainer(denoiser, scenes, config, trace).run(1)


def train_stage2(denoiser: Denoiser, scenes: Sequence[SceneSequence], config: RunConfig, trace: Optional[TraceLogger] = None) -> StageResult:
    return StageTrainer(denoiser, scenes, config, trace).run(2)


def train_stage3(denoiser: Denoiser, scenes: Sequence[SceneSequence], config: RunConfig, trace: Optional[TraceLogger] = None) -> StageResult:
    return StageTrainer(denoiser, scenes, config, trace).run(3)


TRAINERS = {1: train_stage1, 2: train_stage2, 3: train_stage3}
