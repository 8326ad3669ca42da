import csv
import re

import pandas as pd
import pytest

from stage_world.eval_harness import RESULT_COLUMNS, ablation_direction, run_ablation, run_stability
from stage_world.runner import cmd_synth, cmd_train
from stage_world.synthdata import DatasetError


def _medians(frechet, drift):
    return pd.DataFrame({"stage": [1, 2, 3], "proxy_frechet": frechet, "drift_slope": drift})


def _section_content(report_text: str, heading: str) -> str:
    pattern = rf"## {re.escape(heading)}\n(.*?)(?=\n## |\Z)"
    match = re.search(pattern, report_text, re.S)
    assert match, f"Missing section: {heading}"
    return match.group(1).strip()


@pytest.mark.parametrize(
    ("frechet", "drift", "expected"),
    [
        ([3.0, 2.0, 1.0], [0.3, 0.2, 0.2], {"proxy_frechet": True, "drift_slope": True}),
        ([3.0, 3.0, 1.0], [0.3, 0.2, 0.1], {"proxy_frechet": False, "drift_slope": True}),
        ([3.0, 2.0, 2.5], [0.3, 0.4, 0.1], {"proxy_frechet": False, "drift_slope": False}),
    ],
)
def test_ablation_direction(frechet, drift, expected):
    assert ablation_direction(_medians(frechet, drift)) == expected


def test_ablation_direction_needs_every_stage():
    partial = pd.DataFrame({"stage": [1, 2], "proxy_frechet": [2.0, 1.0], "drift_slope": [0.2, 0.1]})
    assert ablation_direction(partial) == {"proxy_frechet": False, "drift_slope": False}


def test_ablation_produces_results_and_report(tmp_path, small_config, capsys):
    passed = run_ablation(small_config, tmp_path, seeds=(0,), steps=2)

    assert passed
    run_dir = tmp_path / "runs" / "ablation"
    with open(run_dir / "results.csv", newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == list(RESULT_COLUMNS)
    assert [row[1] for row in rows[1:]] == ["1", "2", "3"]
    assert all(row[2] == "pass" for row in rows[1:])
    assert (run_dir / "seed0" / "stage3" / "generate" / "report.md").exists()

    report_text = (run_dir / "report.md").read_text()
    assert report_text.startswith("# Ablation Report")
    medians = _section_content(report_text, "Median per Variant")
    assert "proxy_frechet" in medians
    assert "proxy_frechet_1.png" in _section_content(report_text, "Charts")
    assert "MEDIAN(proxy_frechet)" in _section_content(report_text, "Appendix")
    assert (run_dir / "tables" / "query_1.csv").exists()

    out = capsys.readouterr().out
    assert "proxy_frechet:" in out
    assert "drift_slope:" in out


def test_corrupt_dataset_stops_the_ablation(tmp_path, small_config):
    cmd_synth(small_config, tmp_path)
    (tmp_path / "data" / "train" / "latents.bin").write_bytes(b"")

    with pytest.raises(DatasetError, match="latents.bin"):
        run_ablation(small_config, tmp_path, seeds=(0,), steps=1)


def test_stability_compares_fusion_on_and_off(tmp_path, small_config):
    cmd_synth(small_config, tmp_path)
    first = cmd_train(small_config, 1, tmp_path, steps=2)
    second = cmd_train(small_config, 2, tmp_path, init=first.checkpoint_path, steps=4)

    verdict = run_stability(small_config, second.checkpoint_path, tmp_path, seeds=(0, 1), frames=4)

    assert isinstance(verdict, bool)
    table = pd.read_csv(tmp_path / "runs" / "stability" / "stability.csv")
    assert len(table) == 4
    assert sorted(table["fusion"].tolist()) == [False, False, True, True]
    assert table["drift_slope"].notna().all()
