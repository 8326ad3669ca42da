"""Command-line interface for stage_world."""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from stage_world.artifacts import ArtifactError
from stage_world.config import ConfigError, load_run_config
from stage_world.denoiser import TrainingError
from stage_world.eval_harness import DEFAULT_SEEDS, run_ablation, run_stability
from stage_world.geometry import GeometryError
from stage_world.htft import StreamingBufferError
from stage_world.metrics import MetricsError
from stage_world.numerics import CheckpointError, NumericsError, ShapeError
from stage_world.pipeline import PipelineError
from stage_world.reporter import ReportGenerationError
from stage_world.runner import cmd_generate, cmd_gradcheck, cmd_synth, cmd_train
from stage_world.scheduler import ScheduleError
from stage_world.synthdata import DatasetError

STAGE_ERRORS = (
    ArtifactError,
    CheckpointError,
    ConfigError,
    DatasetError,
    GeometryError,
    MetricsError,
    NumericsError,
    PipelineError,
    ReportGenerationError,
    ScheduleError,
    ShapeError,
    StreamingBufferError,
    TrainingError,
)


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="Directory every relative path is resolved against")
    common.add_argument("--config", default=None, help="run-config.json (relative to --workdir)")
    common.add_argument("--threads", type=int, default=1, help="Cap on worker threads")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Streaming world-model video generation at desk scale")
    subparsers = parser.add_subparsers(dest="command", required=True)
    common = _common_options()

    synth_parser = subparsers.add_parser("synth", parents=[common], help="Synthesize the train/eval datasets")
    synth_parser.add_argument("--scenes", type=int, default=None, help="Number of training scenes")
    synth_parser.add_argument("--eval-scenes", type=int, default=None, help="Number of evaluation scenes")
    synth_parser.add_argument("--frames", type=int, default=None, help="Frames per scene")

    train_parser = subparsers.add_parser("train", parents=[common], help="Run one training stage")
    train_parser.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    train_parser.add_argument("--init", default=None, help="Checkpoint to start from (required for stages 2 and 3)")
    train_parser.add_argument("--steps", type=int, default=None, help="Override train.steps")
    train_parser.add_argument("--out", default=None, help="Run directory")

    generate_parser = subparsers.add_parser("generate", parents=[common], help="Stream frames from a checkpoint")
    generate_parser.add_argument("--checkpoint", required=True)
    generate_parser.add_argument("--frames", type=int, default=None)
    generate_parser.add_argument("--infinite", action="store_true", help="Extrapolate conditions past the ground truth")
    generate_parser.add_argument("--dump-frames", default=None, help="Directory for decoded PGM frames")
    generate_parser.add_argument("--draws", type=int, default=None, help="Seeds pooled for the Frechet metrics")
    generate_parser.add_argument("--eval-short", action="store_true", help="Refresh the condition latent from ground truth")
    generate_parser.add_argument("--scene", type=int, default=0, help="Evaluation scene index")
    generate_parser.add_argument("--out", default=None, help="Run directory")

    gradcheck_parser = subparsers.add_parser("gradcheck", parents=[common], help="Finite-difference gradient checks")
    gradcheck_parser.add_argument("--only", nargs="*", default=None, help="Restrict to these ops")
    gradcheck_parser.add_argument("--out", default=None, help="Run directory")

    ablate_parser = subparsers.add_parser("ablate", parents=[common], help="Stage 1/2/3 ablation over seeds")
    ablate_parser.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_SEEDS))
    ablate_parser.add_argument("--steps", type=int, default=None, help="Override train.steps for every stage")
    ablate_parser.add_argument("--out", default=None, help="Run directory")

    stability_parser = subparsers.add_parser("stability", parents=[common], help="Drift with fusion on versus ablated")
    stability_parser.add_argument("--checkpoint", required=True, help="Stage-2 checkpoint")
    stability_parser.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_SEEDS))
    stability_parser.add_argument("--frames", type=int, default=200)
    stability_parser.add_argument("--out", default=None, help="Run directory")
    return parser


def _run(args: argparse.Namespace) -> bool:
    workdir = Path(args.workdir)
    config_path = workdir / args.config if args.config else None
    config = load_run_config(config_path)

    if args.command == "synth":
        result = cmd_synth(config, workdir, threads=args.threads, scenes=args.scenes, eval_scenes=args.eval_scenes, frames=args.frames)
        print(f"wrote {result.train_scenes} train scenes to {result.train_path}")
        print(f"wrote {result.eval_scenes} eval scenes to {result.eval_path}")
        return True

    if args.command == "train":
        trained = cmd_train(config, args.stage, workdir, init=args.init, steps=args.steps, out=args.out)
        final = trained.result.losses[-1].loss if trained.result.losses else float("nan")
        print(f"stage {args.stage}: {len(trained.result.losses)} steps, final loss {final!r}")
        print(f"checkpoint: {trained.checkpoint_path}")
        return True

    if args.command == "generate":
        generated = cmd_generate(
            config,
            args.checkpoint,
            workdir,
            frames=args.frames,
            infinite=args.infinite,
            dump_frames=args.dump_frames,
            draws=args.draws,
            eval_short=args.eval_short,
            scene_index=args.scene,
            out=args.out,
        )
        for key, value in generated.metrics.summary().items():
            print(f"{key}: {value!r}")
        print(f"report: {generated.report_path}")
        return True

    if args.command == "gradcheck":
        report = cmd_gradcheck(config, workdir, only=args.only, out=args.out)
        print(report.to_dataframe().to_markdown(index=False))
        for op in report.failures():
            print(f"FAILED: {op}", file=sys.stderr)
        return report.passed

    if args.command == "ablate":
        return run_ablation(config, workdir, seeds=args.seeds, steps=args.steps, out=args.out, threads=args.threads)

    if args.command == "stability":
        return run_stability(config, args.checkpoint, workdir, seeds=args.seeds, frames=args.frames, out=args.out)
    return False


def main(argv: Optional[List[str]] = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "train" and args.stage > 1 and args.init is None:
        parser.error(f"--init is required for stage {args.stage}")
    if args.threads < 1:
        parser.error("--threads must be at least 1")

    try:
        success = _run(args)
    except STAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)
    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
