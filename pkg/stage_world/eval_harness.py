"""Evaluation harness: three-stage ablation over seeds and the fusion stability comparison."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from stage_world import numerics as nx
from stage_world.artifacts import ChartTool, SQLTool
from stage_world.config import RunConfig
from stage_world.metrics import drift_metric, psnr
from stage_world.pipeline import StreamGenerator, scene_conditions
from stage_world.reporter import generate_ablation_report
from stage_world.runner import (
    EVAL_SPLIT,
    TRAIN_SPLIT,
    cmd_generate,
    cmd_synth,
    cmd_train,
    dataset_path,
    load_denoiser,
    resolve,
    with_seed,
)
from stage_world.synthdata import SceneSequence, gen_scene, random_scene_spec, read_dataset

DEFAULT_SEEDS = (0, 1, 2)
STAGES = (1, 2, 3)

ABLATION_SQL = (
    "SELECT stage, "
    "MEDIAN(proxy_frechet) AS proxy_frechet, "
    "MEDIAN(drift_slope) AS drift_slope, "
    "MEDIAN(mean_psnr) AS mean_psnr, "
    "COUNT(*) AS runs "
    "FROM results "
    "WHERE status = 'pass' "
    "GROUP BY stage "
    "ORDER BY stage"
)

STABILITY_SQL = (
    "SELECT fusion, "
    "MEDIAN(drift_slope) AS drift_slope, "
    "MEDIAN(mean_psnr) AS mean_psnr, "
    "COUNT(*) AS runs "
    "FROM results "
    "GROUP BY fusion "
    "ORDER BY fusion DESC"
)


@dataclass(frozen=True)
class EvalResult:
    seed: int
    stage: int
    status: str
    runtime_ms: int
    proxy_frechet: Optional[float]
    drift_slope: Optional[float]
    mean_psnr: Optional[float]
    run_dir: str
    error: str


RESULT_COLUMNS = (
    "seed",
    "stage",
    "status",
    "runtime_ms",
    "proxy_frechet",
    "drift_slope",
    "mean_psnr",
    "run_dir",
    "error",
)


def _write_results_csv(results_path: Path, results: Iterable[EvalResult]) -> None:
    results_path.parent.mkdir(parents=True, exist_ok=True)
    with open(results_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(RESULT_COLUMNS)
        for result in results:
            writer.writerow(["" if getattr(result, column) is None else getattr(result, column) for column in RESULT_COLUMNS])


def _print_summary_table(table: pd.DataFrame) -> None:
    print(table.to_markdown(index=False))


def _ensure_dataset(config: RunConfig, workdir: Path, threads: int) -> None:
    if not (dataset_path(config, workdir, TRAIN_SPLIT) / "meta.json").exists() or not (
        dataset_path(config, workdir, EVAL_SPLIT) / "meta.json"
    ).exists():
        cmd_synth(config, workdir, threads=threads)


def _run_seed(config: RunConfig, workdir: Path, seed_dir: Path, steps: Optional[int]) -> List[EvalResult]:
    results: List[EvalResult] = []
    train_scenes = read_dataset(dataset_path(config, workdir, TRAIN_SPLIT))
    init: Optional[Path] = None
    for stage in STAGES:
        stage_dir = seed_dir / f"stage{stage}"
        start_time = time.perf_counter()
        status, error = "pass", ""
        summary: Dict[str, Optional[float]] = {}
        try:
            trained = cmd_train(config, stage, workdir, init=init, steps=steps, out=stage_dir, scenes=train_scenes)
            init = trained.checkpoint_path
            generated = cmd_generate(config, init, workdir, out=stage_dir / "generate")
            summary = generated.metrics.summary()
        except Exception as exc:
            status, error = "fail", str(exc)
        runtime_ms = int((time.perf_counter() - start_time) * 1000)
        results.append(
            EvalResult(
                seed=config.seed,
                stage=stage,
                status=status,
                runtime_ms=runtime_ms,
                proxy_frechet=summary.get("proxy_frechet"),
                drift_slope=summary.get("drift_slope"),
                mean_psnr=summary.get("mean_psnr"),
                run_dir=str(stage_dir),
                error=error,
            )
        )
        if status == "fail":
            break
    return results


def ablation_direction(medians: pd.DataFrame) -> Dict[str, bool]:
    """Stage 1 -> 2 must strictly improve both metrics; stage 2 -> 3 must improve or tie."""
    by_stage = medians.set_index("stage")
    checks: Dict[str, bool] = {}
    for metric in ("proxy_frechet", "drift_slope"):
        if not set(STAGES) <= set(by_stage.index):
            checks[metric] = False
            continue
        first, second, third = (float(by_stage.loc[stage, metric]) for stage in STAGES)
        checks[metric] = second < first and third <= second
    return checks


def run_ablation(
    config: RunConfig,
    workdir: Path | str = ".",
    seeds: Sequence[int] = DEFAULT_SEEDS,
    steps: Optional[int] = None,
    out: Optional[Path | str] = None,
    threads: int = 1,
) -> bool:
    """Train stages 1 -> 2 -> 3 per seed, evaluate each stage and aggregate medians with SQL."""
    workdir = Path(workdir)
    run_dir = resolve(workdir, out) if out is not None else resolve(workdir, config.paths.runs) / "ablation"
    run_dir.mkdir(parents=True, exist_ok=True)
    _ensure_dataset(config, workdir, threads)

    results: List[EvalResult] = []
    for seed in seeds:
        results.extend(_run_seed(with_seed(config, seed), workdir, run_dir / f"seed{seed}", steps))

    results_path = run_dir / "results.csv"
    _write_results_csv(results_path, results)

    medians = pd.DataFrame(columns=["stage", "proxy_frechet", "drift_slope", "mean_psnr", "runs"])
    sql = ABLATION_SQL
    chart_paths: List[str] = []
    if any(result.status == "pass" for result in results):
        sql_result = SQLTool(data_path=str(results_path), artifacts_dir=str(run_dir)).run_query(ABLATION_SQL)
        medians, sql = sql_result.dataframe, sql_result.sql
        charts = ChartTool(artifacts_dir=str(run_dir))
        for metric in ("proxy_frechet", "drift_slope"):
            chart = charts.line_chart(medians, x="stage", series=[metric], title=f"Median {metric} per stage", name=metric)
            chart_paths.append(chart.chart_path)
    _print_summary_table(medians)
    generate_ablation_report(str(run_dir / "report.md"), str(results_path), medians, sql, chart_paths)

    checks = ablation_direction(medians) if len(medians) else {}
    for metric, ok in checks.items():
        print(f"{metric}: {'improves' if ok else 'does not improve'} across stages")
    return all(result.status == "pass" for result in results)


@dataclass(frozen=True)
class StabilityResult:
    seed: int
    fusion: bool
    drift_slope: float
    mean_psnr: float
    runtime_ms: int


def _stability_scene(seed: int, frames: int) -> SceneSequence:
    scene_seed = int(nx.make_rng(seed, "stability").integers(0, 2**31 - 1))
    return gen_scene(random_scene_spec(scene_seed, frames + 1))


def run_stability(
    config: RunConfig,
    checkpoint: Path | str,
    workdir: Path | str = ".",
    seeds: Sequence[int] = DEFAULT_SEEDS,
    frames: int = 200,
    out: Optional[Path | str] = None,
) -> bool:
    """Drift slope of one checkpoint with fusion on against fusion ablated; True when fusion drifts less."""
    workdir = Path(workdir)
    run_dir = resolve(workdir, out) if out is not None else resolve(workdir, config.paths.runs) / "stability"
    run_dir.mkdir(parents=True, exist_ok=True)
    denoiser = load_denoiser(resolve(workdir, checkpoint), config)
    schedule = config.schedule.build()

    rows: List[StabilityResult] = []
    for seed in seeds:
        scene = _stability_scene(seed, frames)
        conditions = scene_conditions(scene, config.loss_weights)[1:]
        reference = scene.latents[1 : frames + 1]
        for fusion in (True, False):
            stream = replace(config.stream, fusion_enabled=fusion)
            start_time = time.perf_counter()
            output = StreamGenerator(denoiser, schedule, stream).run(scene.latents[0], conditions, frames, seed=seed)
            runtime_ms = int((time.perf_counter() - start_time) * 1000)
            rows.append(
                StabilityResult(
                    seed=seed,
                    fusion=fusion,
                    drift_slope=drift_metric(output.latents, reference).slope,
                    mean_psnr=float(np.mean([psnr(gen, ref) for gen, ref in zip(output.latents, reference)])),
                    runtime_ms=runtime_ms,
                )
            )

    results_path = run_dir / "stability.csv"
    pd.DataFrame([asdict(row) for row in rows]).to_csv(results_path, index=False)
    medians = SQLTool(data_path=str(results_path), artifacts_dir=str(run_dir)).run_query(STABILITY_SQL).dataframe
    _print_summary_table(medians)
    by_fusion = medians.set_index("fusion")["drift_slope"]
    return bool(by_fusion.loc[True] < by_fusion.loc[False])
