from pathlib import Path

import numpy as np
import pytest

from stage_world.artifacts import (
    ArtifactError,
    ChartTool,
    SQLTool,
    read_latents,
    read_pgm,
    series_frame,
    write_csv,
    write_frames,
    write_latents,
    write_pgm,
)


def _write_results(tmp_path: Path) -> Path:
    data_path = tmp_path / "results.csv"
    data_path.write_text("variant,seed,proxy_frechet\nfull,0,1.5\nfull,1,2.5\nno_fusion,0,4.0\nno_fusion,1,6.0\n")
    return data_path


def test_pgm_round_trip_quantizes_to_8_bits(tmp_path):
    frame = np.linspace(-0.2, 1.2, 24, dtype=np.float32).reshape(1, 4, 6)
    path = write_pgm(tmp_path / "frame.pgm", frame)
    assert path.read_bytes().startswith(b"P5\n6 4\n255\n")
    loaded = read_pgm(path)
    assert loaded.shape == (4, 6)
    np.testing.assert_allclose(loaded, np.clip(frame[0], 0.0, 1.0), atol=0.5 / 255 + 1e-6)


def test_pgm_rejects_bad_input(tmp_path):
    with pytest.raises(ArtifactError):
        write_pgm(tmp_path / "bad.pgm", np.zeros((2, 2, 2, 2)))
    (tmp_path / "text.pgm").write_text("P2 not binary")
    with pytest.raises(ArtifactError):
        read_pgm(tmp_path / "text.pgm")


def test_frames_are_numbered_from_one(tmp_path):
    paths = write_frames(tmp_path / "frames", [np.zeros((1, 2, 2)), np.ones((1, 2, 2))])
    assert [path.name for path in paths] == ["frame_0001.pgm", "frame_0002.pgm"]
    assert read_pgm(paths[1]).min() == 1.0


def test_latent_files(tmp_path):
    latents = np.arange(2 * 1 * 3 * 3, dtype=np.float32).reshape(2, 1, 3, 3)
    bin_path, meta_path = write_latents(tmp_path / "out" / "latents", latents)
    assert bin_path.stat().st_size == latents.size * 4
    assert meta_path.exists()
    np.testing.assert_array_equal(read_latents(tmp_path / "out" / "latents"), latents)

    bin_path.write_bytes(bin_path.read_bytes()[:-4])
    with pytest.raises(ArtifactError):
        read_latents(tmp_path / "out" / "latents")
    with pytest.raises(ArtifactError):
        read_latents(tmp_path / "missing")


def test_write_csv_keeps_column_order(tmp_path):
    path = write_csv(tmp_path / "rows.csv", [{"b": 1, "a": 2}], columns=["a", "b"])
    assert path.read_text().splitlines()[0] == "a,b"


def test_rejects_non_select(tmp_path):
    tool = SQLTool(str(_write_results(tmp_path)), artifacts_dir=str(tmp_path / "artifacts"))
    with pytest.raises(ValueError):
        tool.run_query("DELETE FROM results")


def test_rejects_semicolon_multi_statement(tmp_path):
    tool = SQLTool(str(_write_results(tmp_path)), artifacts_dir=str(tmp_path / "artifacts"))
    with pytest.raises(ValueError):
        tool.run_query("SELECT * FROM results; SELECT * FROM results")


def test_rejects_forbidden_keyword_inside_select(tmp_path):
    tool = SQLTool(str(_write_results(tmp_path)), artifacts_dir=str(tmp_path / "artifacts"))
    with pytest.raises(ValueError, match="DROP"):
        tool.run_query("SELECT variant FROM results WHERE seed IN (SELECT seed FROM results) -- drop results")


def test_appends_limit_when_missing(tmp_path):
    tool = SQLTool(str(_write_results(tmp_path)), artifacts_dir=str(tmp_path / "artifacts"))
    assert tool._prepare_query("SELECT * FROM results").endswith("LIMIT 200")


def test_clamps_limit_over_max(tmp_path):
    tool = SQLTool(str(_write_results(tmp_path)), artifacts_dir=str(tmp_path / "artifacts"))
    assert "LIMIT 200" in tool._prepare_query("SELECT * FROM results LIMIT 500")
    assert tool._prepare_query("SELECT * FROM results LIMIT 5;").endswith("LIMIT 5")


def test_run_query_saves_table(tmp_path):
    tool = SQLTool(str(_write_results(tmp_path)), artifacts_dir=str(tmp_path / "artifacts"))
    result = tool.run_query(
        "SELECT variant, median(proxy_frechet) AS proxy_frechet FROM results GROUP BY variant ORDER BY variant"
    )
    assert result.query_id == 1
    assert list(result.dataframe["variant"]) == ["full", "no_fusion"]
    assert list(result.dataframe["proxy_frechet"]) == [2.0, 5.0]
    assert Path(result.table_path).name == "query_1.csv"
    assert Path(result.table_path).exists()
    assert "no_fusion" in result.preview_markdown


def test_line_chart_writes_numbered_png(tmp_path):
    tool = ChartTool(artifacts_dir=str(tmp_path / "artifacts"))
    frame = series_frame({"psnr": [10.0, 12.0, 11.0]})
    first = tool.line_chart(frame, "frame", ["psnr"], "PSNR", name="psnr")
    second = tool.line_chart(frame, "frame", ["psnr"], "PSNR", name="psnr", log_y=True)
    assert Path(first.chart_path).name == "psnr_1.png"
    assert Path(second.chart_path).name == "psnr_2.png"
    assert Path(first.chart_path).read_bytes()[:4] == b"\x89PNG"


def test_series_frame_pads_short_columns():
    frame = series_frame({"a": [1.0, 2.0, 3.0], "b": [4.0]})
    assert list(frame["frame"]) == [1, 2, 3]
    assert frame["b"].isna().sum() == 2
