"""Command implementations: synthesis, staged training, generation and gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from stage_world import numerics as nx
from stage_world.artifacts import ChartTool, series_frame, write_csv, write_frames, write_latents
from stage_world.config import RunConfig, save_run_config
from stage_world.denoiser import Denoiser, TrainingError, UNetConfig
from stage_world.gradcheck import GradcheckReport, run_gradchecks
from stage_world.metrics import MetricsReport, evaluate
from stage_world.pipeline import (
    FrameConditions,
    GenerationOutput,
    PipelineError,
    StageResult,
    StageTrainer,
    StreamGenerator,
    predicted_conditions,
    scene_conditions,
)
from stage_world.reporter import generate_report
from stage_world.synthdata import SceneSequence, decode_latent, gen_scenes, random_scene_spec, read_dataset, write_dataset
from stage_world.tracing import TraceLogger

TRAIN_SPLIT = "train"
EVAL_SPLIT = "eval"
CHECKPOINT_NAME = "model"
LOSS_COLUMNS = ("step", "loss", "lr", "stage")


@dataclass
class SynthArtifacts:
    train_path: Path
    eval_path: Path
    train_scenes: int
    eval_scenes: int


@dataclass
class TrainArtifacts:
    run_dir: Path
    checkpoint_path: Path
    loss_path: Path
    result: StageResult


@dataclass
class GenerateArtifacts:
    run_dir: Path
    latents: np.ndarray
    metrics: MetricsReport
    report_path: Path
    frame_paths: List[Path]


def resolve(workdir: Path | str, path: Path | str) -> Path:
    candidate = Path(path)
    return candidate if candidate.is_absolute() else Path(workdir) / candidate


def dataset_path(config: RunConfig, workdir: Path | str, split: str) -> Path:
    return resolve(workdir, config.paths.dataset) / split


def _scene_seeds(seed: int, split: str, count: int) -> List[int]:
    rng = nx.make_rng(seed, "synth", split)
    return [int(value) for value in rng.integers(0, 2**31 - 1, size=count)]


def cmd_synth(
    config: RunConfig,
    workdir: Path | str = ".",
    threads: int = 1,
    scenes: Optional[int] = None,
    eval_scenes: Optional[int] = None,
    frames: Optional[int] = None,
) -> SynthArtifacts:
    n_frames = config.synth.n_frames if frames is None else frames
    counts = {
        TRAIN_SPLIT: config.synth.train_scenes if scenes is None else scenes,
        EVAL_SPLIT: config.synth.eval_scenes if eval_scenes is None else eval_scenes,
    }
    trace = TraceLogger(path=str(resolve(workdir, config.paths.dataset) / "trace.jsonl"))
    try:
        trace.log("config", config.to_dict())
        paths = {}
        for split, count in counts.items():
            paths[split] = dataset_path(config, workdir, split)
            if count == 0:
                continue
            with trace.span("synth_split", split=split, scenes=count, frames=n_frames):
                specs = [random_scene_spec(seed, n_frames) for seed in _scene_seeds(config.seed, split, count)]
                sequences = gen_scenes(specs, threads=threads)
                write_dataset(paths[split], sequences, store_frames=config.synth.store_frames)
            for spec in specs:
                trace.log("synth_scene", {"split": split, "seed": spec.seed, "frames": spec.n_frames, "agents": len(spec.agents)})
        return SynthArtifacts(
            train_path=paths[TRAIN_SPLIT],
            eval_path=paths[EVAL_SPLIT],
            train_scenes=counts[TRAIN_SPLIT],
            eval_scenes=counts[EVAL_SPLIT],
        )
    except Exception as exc:
        trace.log("error", {"message": str(exc)})
        raise
    finally:
        trace.flush()


# checkpoints


def load_denoiser(checkpoint: Path | str, config: RunConfig) -> Denoiser:
    """Rebuild a Denoiser, refusing checkpoints trained with another network config."""
    params, meta = nx.load_checkpoint(checkpoint)
    stored = meta.get("unet")
    if not isinstance(stored, dict):
        raise nx.CheckpointError(f"checkpoint {checkpoint} carries no network config")
    if UNetConfig.from_dict(stored) != config.unet:
        raise nx.CheckpointError(f"checkpoint/config mismatch: {checkpoint} was trained with unet={stored}")
    return Denoiser(config.unet, params, config.stream.selection())


def save_denoiser(path: Path | str, denoiser: Denoiser, stage: int, config: RunConfig, steps: int) -> Path:
    bin_path, _ = nx.save_checkpoint(
        path,
        denoiser.params,
        {"stage": stage, "seed": config.seed, "steps": steps, "unet": denoiser.config.to_dict()},
    )
    return bin_path.with_suffix("")


def cmd_train(
    config: RunConfig,
    stage: int,
    workdir: Path | str = ".",
    init: Optional[Path | str] = None,
    steps: Optional[int] = None,
    out: Optional[Path | str] = None,
    scenes: Optional[Sequence[SceneSequence]] = None,
) -> TrainArtifacts:
    """Train one stage and write the checkpoint, loss.csv, run-config.json and a loss chart."""
    config = config.with_stage(stage)
    run_dir = resolve(workdir, out) if out is not None else resolve(workdir, config.paths.runs) / f"stage{stage}"
    trace = TraceLogger(path=str(run_dir / "trace.jsonl"))
    try:
        trace.log("config", config.to_dict())
        if stage > 1 and init is None:
            raise TrainingError(f"stage {stage} needs an init checkpoint")
        if scenes is None:
            scenes = read_dataset(dataset_path(config, workdir, TRAIN_SPLIT))
        if init is not None:
            denoiser = load_denoiser(resolve(workdir, init), config)
        else:
            denoiser = Denoiser.initialize(config.unet, seed=config.seed, selection=config.stream.selection())

        with trace.span("train", stage=stage) as details:
            result = StageTrainer(denoiser, scenes, config, trace).run(stage, steps)
            details["steps"] = len(result.losses)

        loss_path = write_csv(
            run_dir / "loss.csv",
            ({"step": r.step, "loss": r.loss, "lr": r.lr, "stage": r.stage} for r in result.losses),
            columns=LOSS_COLUMNS,
        )
        checkpoint_path = save_denoiser(run_dir / CHECKPOINT_NAME, denoiser, stage, config, len(result.losses))
        save_run_config(config, run_dir)
        trace.log("checkpoint_saved", {"path": str(checkpoint_path), "parameters": denoiser.params.count()})

        if result.losses:
            chart = ChartTool(artifacts_dir=str(run_dir)).line_chart(
                series_frame({"loss": [r.loss for r in result.losses]}, index_name="step"),
                x="step",
                series=["loss"],
                title=f"Stage {stage} training loss",
                name="loss",
                log_y=True,
            )
            trace.log("chart_saved", {"chart_id": chart.chart_id, "chart_path": chart.chart_path, "title": "loss"})
        return TrainArtifacts(run_dir=run_dir, checkpoint_path=checkpoint_path, loss_path=loss_path, result=result)
    except Exception as exc:
        trace.log("error", {"message": str(exc)})
        raise
    finally:
        trace.flush()


# generation


def _conditions_for(
    scene: SceneSequence,
    config: RunConfig,
    n_frames: int,
    infinite: bool,
) -> Iterable[FrameConditions]:
    if infinite or not config.train.gt_conditions:
        return predicted_conditions(scene.state_at(0), scene.rig, config.loss_weights)
    available = scene.n_frames - 1
    if n_frames > available:
        raise PipelineError(
            f"{n_frames} frames requested but the scene only has {available} ground-truth condition frames; "
            "use --infinite to extrapolate"
        )
    return scene_conditions(scene, config.loss_weights)[1:]


def _pooled_reference(scenes: Sequence[SceneSequence]) -> np.ndarray:
    return np.concatenate([scene.latents[1:] for scene in scenes])


def cmd_generate(
    config: RunConfig,
    checkpoint: Path | str,
    workdir: Path | str = ".",
    frames: Optional[int] = None,
    infinite: bool = False,
    dump_frames: Optional[Path | str] = None,
    draws: Optional[int] = None,
    eval_short: bool = False,
    scene_index: int = 0,
    out: Optional[Path | str] = None,
) -> GenerateArtifacts:
    """Stream frames 1..n from the first frame of an eval scene and score them against its ground truth."""
    n_frames = config.generate.frames if frames is None else frames
    n_draws = config.generate.draws if draws is None else draws
    run_dir = resolve(workdir, out) if out is not None else resolve(workdir, config.paths.runs) / "generate"
    trace = TraceLogger(path=str(run_dir / "trace.jsonl"))
    try:
        trace.log("config", config.to_dict())
        denoiser = load_denoiser(resolve(workdir, checkpoint), config)
        eval_scenes = read_dataset(dataset_path(config, workdir, EVAL_SPLIT))
        if not 0 <= scene_index < len(eval_scenes):
            raise PipelineError(f"scene index {scene_index} out of range for {len(eval_scenes)} eval scenes")
        scene = eval_scenes[scene_index]
        schedule = config.schedule.build()
        generator = StreamGenerator(denoiser, schedule, config.stream)
        refresh = config.generate.refresh_every if eval_short and not infinite else None

        outputs: List[GenerationOutput] = []
        for draw in range(n_draws):
            conditions = _conditions_for(scene, config, n_frames, infinite)
            with trace.span("draw", draw=draw, frames=n_frames, infinite=infinite):
                output = generator.run(
                    scene.latents[0],
                    conditions,
                    n_frames,
                    seed=config.seed + draw,
                    gt_latents=scene.latents if refresh else None,
                    gt_refresh_every=refresh,
                )
            for index, (ms, size) in enumerate(zip(output.frame_ms, output.buffer_bytes), start=1):
                trace.log("frame_generated", {"draw": draw, "frame": index, "frame_ms": ms, "buffer_bytes": size})
            outputs.append(output)

        primary = outputs[0]
        write_latents(run_dir / "latents", primary.latents)
        for draw, output in enumerate(outputs[1:], start=1):
            write_latents(run_dir / f"latents_draw{draw}", output.latents)
        frame_paths: List[Path] = []
        if dump_frames is not None:
            frame_paths = write_frames(resolve(workdir, dump_frames), [decode_latent(latent) for latent in primary.latents])

        aligned = min(n_frames, scene.n_frames - 1)
        metrics = evaluate(
            primary.latents[:aligned],
            scene.latents[1 : aligned + 1],
            frame_ms=primary.frame_ms,
            buffer_bytes=primary.buffer_bytes,
            pooled_generated=np.concatenate([output.latents for output in outputs]),
            pooled_reference=_pooled_reference(eval_scenes),
        )
        metrics_path = metrics.write_json(run_dir / "metrics.json")
        trace.log("metrics", metrics.summary())

        charts = ChartTool(artifacts_dir=str(run_dir))
        series = (
            ("psnr", "PSNR vs ground truth (dB)", metrics.psnr),
            ("drift", "Feature drift", metrics.drift),
            ("frame_ms", "Wall time per frame (ms)", metrics.frame_ms),
        )
        for key, title, values in series:
            if not values:
                continue
            chart = charts.line_chart(series_frame({key: values}), x="frame", series=[key], title=title, name=key)
            trace.log("chart_saved", {"chart_id": chart.chart_id, "chart_path": chart.chart_path, "title": title})

        report_path = run_dir / "report.md"
        trace.flush()
        generate_report(report_path=str(report_path), trace_path=trace.path, metrics_path=str(metrics_path))
        trace.log("report_written", {"report_path": str(report_path)})
        return GenerateArtifacts(
            run_dir=run_dir,
            latents=primary.latents,
            metrics=metrics,
            report_path=report_path,
            frame_paths=frame_paths,
        )
    except Exception as exc:
        trace.log("error", {"message": str(exc)})
        raise
    finally:
        trace.flush()


def cmd_gradcheck(
    config: RunConfig,
    workdir: Path | str = ".",
    only: Optional[Sequence[str]] = None,
    out: Optional[Path | str] = None,
) -> GradcheckReport:
    run_dir = resolve(workdir, out) if out is not None else resolve(workdir, config.paths.runs) / "gradcheck"
    trace = TraceLogger(path=str(run_dir / "trace.jsonl"))
    try:
        trace.log("config", config.to_dict())
        report = run_gradchecks(seed=config.seed, only=only)
        for result in report.results:
            trace.log(
                "gradcheck_op",
                {"op": result.op, "max_rel_err": result.max_rel_err, "worst_param": result.worst_param, "passed": result.passed},
            )
        write_csv(run_dir / "gradcheck.csv", report.to_dataframe().to_dict("records"), columns=("op", "max_rel_err", "worst_param", "passed"))
        return report
    except Exception as exc:
        trace.log("error", {"message": str(exc)})
        raise
    finally:
        trace.flush()


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    return replace(config, seed=seed)
