import re
from pathlib import Path

import pandas as pd
import pytest

from stage_world.artifacts import ChartTool, series_frame
from stage_world.metrics import MetricsReport
from stage_world.reporter import ReportGenerationError, generate_ablation_report, generate_report
from stage_world.tracing import TraceLogger


def _section_content(report_text: str, heading: str) -> str:
    pattern = rf"## {re.escape(heading)}\n(.*?)(?=\n## |\Z)"
    match = re.search(pattern, report_text, re.S)
    assert match, f"Missing section: {heading}"
    return match.group(1).strip()


def _run_artifacts(tmp_path: Path, with_chart: bool = True):
    run_dir = tmp_path / "run"
    trace = TraceLogger(path=str(run_dir / "trace.jsonl"))
    trace.log("config", {"seed": 3, "stream": {"capacity": 10}})
    metrics = MetricsReport(psnr=[21.0, 19.5, 18.0], drift=[0.1, 0.2, 0.3], drift_slope=0.1, frame_ms=[4.0, 5.0, 6.0], buffer_bytes=[8, 16, 16])
    metrics_path = metrics.write_json(run_dir / "metrics.json")
    if with_chart:
        chart = ChartTool(str(run_dir / "artifacts")).line_chart(series_frame({"psnr": metrics.psnr}), "frame", ["psnr"], "PSNR per frame", name="psnr")
        trace.log("chart_saved", {"chart_id": chart.chart_id, "chart_path": chart.chart_path, "title": "PSNR per frame"})
    trace.flush()
    return run_dir, trace, metrics_path


def test_report_contains_required_sections(tmp_path):
    run_dir, trace, metrics_path = _run_artifacts(tmp_path)
    report_path = run_dir / "report.md"

    generate_report(str(report_path), trace.path, str(metrics_path))

    report_text = report_path.read_text()
    assert report_text.startswith("# Generation Report\n")

    summary = _section_content(report_text, "Summary")
    assert "- frames: 3" in summary
    assert "- peak_buffer_bytes: 16" in summary
    assert "- proxy_frechet: n/a" in summary

    per_frame = _section_content(report_text, "Per-frame Metrics")
    assert "psnr" in per_frame
    assert len([line for line in per_frame.splitlines() if line.startswith("|")]) == 2 + 3

    charts = _section_content(report_text, "Charts")
    assert "[PSNR per frame](artifacts/charts/psnr_1.png)" in charts

    parameters = _section_content(report_text, "Parameters")
    assert "- seed: 3" in parameters
    assert "(trace.jsonl)" in report_text


def test_preview_rows_limit_the_table(tmp_path):
    run_dir, trace, metrics_path = _run_artifacts(tmp_path, with_chart=False)
    report_path = run_dir / "report.md"
    generate_report(str(report_path), trace.path, str(metrics_path), preview_rows=1)
    per_frame = _section_content(report_path.read_text(), "Per-frame Metrics")
    assert len([line for line in per_frame.splitlines() if line.startswith("|")]) == 3
    assert "- none" in _section_content(report_path.read_text(), "Charts")


def test_missing_chart_is_reported(tmp_path):
    run_dir, trace, metrics_path = _run_artifacts(tmp_path)
    for chart in (run_dir / "artifacts" / "charts").iterdir():
        chart.unlink()
    with pytest.raises(ReportGenerationError, match="Missing required artifacts"):
        generate_report(str(run_dir / "report.md"), trace.path, str(metrics_path))


def test_missing_or_empty_trace_is_reported(tmp_path):
    run_dir, trace, metrics_path = _run_artifacts(tmp_path, with_chart=False)
    with pytest.raises(ReportGenerationError, match="not found"):
        generate_report(str(run_dir / "report.md"), str(run_dir / "absent.jsonl"), str(metrics_path))
    empty = run_dir / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ReportGenerationError, match="empty"):
        generate_report(str(run_dir / "report.md"), str(empty), str(metrics_path))


def test_metrics_without_summary_are_reported(tmp_path):
    run_dir, trace, _ = _run_artifacts(tmp_path, with_chart=False)
    bare = run_dir / "bare.json"
    bare.write_text('{"psnr": []}')
    with pytest.raises(ReportGenerationError, match="no summary"):
        generate_report(str(run_dir / "report.md"), trace.path, str(bare))


def test_ablation_report_sections(tmp_path):
    results_path = tmp_path / "results.csv"
    results_path.write_text("variant,seed,proxy_frechet\nfull,0,1.0\nno_fusion,0,2.0\n")
    medians = pd.DataFrame({"variant": ["full", "no_fusion"], "proxy_frechet": [1.0, 2.0]})
    report_path = tmp_path / "ablation" / "report.md"

    generate_ablation_report(str(report_path), str(results_path), medians, "SELECT variant FROM results")

    text = report_path.read_text()
    assert text.startswith("# Ablation Report\n")
    assert "no_fusion" in _section_content(text, "Median per Variant")
    assert "| full" in _section_content(text, "Runs")
    assert "```sql\nSELECT variant FROM results\n```" in _section_content(text, "Appendix")
    assert "## Charts" not in text


def test_ablation_report_needs_results(tmp_path):
    with pytest.raises(ReportGenerationError):
        generate_ablation_report(str(tmp_path / "report.md"), str(tmp_path / "absent.csv"), pd.DataFrame(), "SELECT 1")
