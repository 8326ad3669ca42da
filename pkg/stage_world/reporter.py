"""Deterministic markdown reports for generation runs and ablations."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import pandas as pd

from stage_world.tracing import read_trace


@dataclass(frozen=True)
class TraceChart:
    chart_id: int
    title: str
    chart_path: str


class ReportGenerationError(RuntimeError):
    """Raised when required artifacts for the report are missing."""


def _load_trace_entries(trace_path: str) -> List[Dict[str, object]]:
    if not Path(trace_path).exists():
        raise ReportGenerationError(f"Trace file not found: {trace_path}")
    entries = read_trace(trace_path)
    if not entries:
        raise ReportGenerationError(f"Trace file is empty: {trace_path}")
    return entries


def _load_metrics(metrics_path: str) -> Dict[str, object]:
    path = Path(metrics_path)
    if not path.exists():
        raise ReportGenerationError(f"Metrics file not found: {metrics_path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _extract_config(entries: Iterable[Dict[str, object]]) -> Optional[Dict[str, object]]:
    for entry in entries:
        if entry.get("event_type") == "config":
            payload = entry.get("payload")
            if isinstance(payload, dict):
                return payload
    return None


def _extract_charts(entries: Iterable[Dict[str, object]]) -> List[TraceChart]:
    charts: List[TraceChart] = []
    for entry in entries:
        if entry.get("event_type") != "chart_saved":
            continue
        payload = entry.get("payload", {})
        chart_id = payload.get("chart_id")
        chart_path = payload.get("chart_path")
        if isinstance(chart_id, int) and isinstance(chart_path, str):
            charts.append(TraceChart(chart_id=chart_id, title=str(payload.get("title", "")), chart_path=chart_path))
    return charts


def _relative_link(report_path: str, target_path: str) -> str:
    report_dir = Path(report_path).parent
    return Path(os.path.relpath(target_path, start=report_dir)).as_posix()


def _validate_artifacts(charts: Iterable[TraceChart]) -> None:
    missing = [chart.chart_path for chart in charts if not Path(chart.chart_path).exists()]
    if missing:
        raise ReportGenerationError(f"Missing required artifacts: {', '.join(missing)}")


def _format(value: object) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _per_frame_table(metrics: Dict[str, object], max_rows: int) -> str:
    columns = {key: metrics.get(key) or [] for key in ("psnr", "drift", "frame_ms", "buffer_bytes")}
    length = max((len(values) for values in columns.values()), default=0)
    if length == 0:
        return "_No per-frame metrics recorded._"
    rows = []
    for index in range(min(length, max_rows)):
        row: Dict[str, object] = {"frame": index + 1}
        for key, values in columns.items():
            row[key] = values[index] if index < len(values) else None
        rows.append(row)
    return pd.DataFrame(rows).to_markdown(index=False)


def generate_report(
    report_path: str,
    trace_path: str,
    metrics_path: str,
    preview_rows: int = 16,
) -> None:
    """Render report.md for one generation run from its trace and metrics JSON."""
    entries = _load_trace_entries(trace_path)
    metrics = _load_metrics(metrics_path)
    summary = metrics.get("summary")
    if not isinstance(summary, dict):
        raise ReportGenerationError(f"Metrics file has no summary: {metrics_path}")
    charts = _extract_charts(entries)
    _validate_artifacts(charts)
    config = _extract_config(entries)

    report_file = Path(report_path)
    report_file.parent.mkdir(parents=True, exist_ok=True)
    with open(report_file, "w", encoding="utf-8") as handle:
        handle.write("# Generation Report\n\n")
        handle.write("## Summary\n")
        for key in ("frames", "mean_psnr", "proxy_frechet", "proxy_frechet_segments", "drift_slope", "mean_frame_ms", "peak_buffer_bytes"):
            handle.write(f"- {key}: {_format(summary.get(key))}\n")
        handle.write("\n")

        handle.write("## Per-frame Metrics\n")
        handle.write(_per_frame_table(metrics, preview_rows))
        handle.write("\n\n")

        handle.write("## Charts\n")
        if not charts:
            handle.write("- none\n")
        for chart in charts:
            handle.write(f"- [{chart.title or Path(chart.chart_path).name}]({_relative_link(report_path, chart.chart_path)})\n")
        handle.write("\n")

        handle.write("## Parameters\n")
        if config:
            for key in sorted(config):
                handle.write(f"- {key}: {json.dumps(config[key], sort_keys=True)}\n")
        else:
            handle.write("- unavailable\n")
        handle.write("\n")

        handle.write("### Trace\n")
        handle.write(f"- Trace file: [{Path(trace_path).as_posix()}]({_relative_link(report_path, trace_path)})\n")


def generate_ablation_report(
    report_path: str,
    results_path: str,
    medians: pd.DataFrame,
    sql: str,
    chart_paths: Iterable[str] = (),
) -> None:
    if not Path(results_path).exists():
        raise ReportGenerationError(f"Results file not found: {results_path}")
    chart_paths = list(chart_paths)
    missing = [path for path in chart_paths if not Path(path).exists()]
    if missing:
        raise ReportGenerationError(f"Missing required artifacts: {', '.join(missing)}")
    results = pd.read_csv(results_path)
    report_file = Path(report_path)
    report_file.parent.mkdir(parents=True, exist_ok=True)
    with open(report_file, "w", encoding="utf-8") as handle:
        handle.write("# Ablation Report\n\n")
        handle.write("## Median per Variant\n")
        handle.write(medians.to_markdown(index=False))
        handle.write("\n\n")
        handle.write("## Runs\n")
        handle.write(results.to_markdown(index=False))
        handle.write("\n\n")
        if chart_paths:
            handle.write("## Charts\n")
            for path in chart_paths:
                handle.write(f"- [{Path(path).name}]({_relative_link(report_path, path)})\n")
            handle.write("\n")
        handle.write("## Appendix\n")
        handle.write("```sql\n")
        handle.write(f"{sql}\n")
        handle.write("```\n")
