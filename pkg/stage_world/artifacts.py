"""Artifact writers: PGM frames, latent files, CSV series, charts and SQL over result tables."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from itertools import count
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import duckdb
import matplotlib
import numpy as np
import pandas as pd

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FORBIDDEN_SQL = (
    "CREATE",
    "INSERT",
    "UPDATE",
    "DELETE",
    "DROP",
    "ALTER",
    "COPY",
    "ATTACH",
    "DETACH",
    "PRAGMA",
)


class ArtifactError(RuntimeError):
    """Raised for unreadable or malformed artifact files."""


# frames and latents


def write_pgm(path: Path | str, frame: np.ndarray) -> Path:
    """Binary P5, 8-bit; values are clipped to [0, 1] and rounded."""
    image = np.asarray(frame, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]
    if image.ndim != 2:
        raise ArtifactError(f"PGM needs a single-channel frame, got shape {np.shape(frame)}")
    height, width = image.shape
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())
    return target


def read_pgm(path: Path | str) -> np.ndarray:
    data = Path(path).read_bytes()
    header = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if header is None:
        raise ArtifactError(f"Not a binary PGM file: {path}")
    width, height, maxval = (int(group) for group in header.groups())
    pixels = np.frombuffer(data[header.end() :], dtype=np.uint8)
    if pixels.size != width * height:
        raise ArtifactError(f"Truncated PGM file: {path}")
    return pixels.reshape(height, width).astype(np.float32) / float(maxval)


def write_frames(directory: Path | str, frames: Sequence[np.ndarray], start: int = 1) -> List[Path]:
    """frame_0001.pgm, frame_0002.pgm, ..."""
    root = Path(directory)
    return [write_pgm(root / f"frame_{index:04d}.pgm", frame) for index, frame in enumerate(frames, start=start)]


def write_latents(path: Path | str, latents: np.ndarray) -> Tuple[Path, Path]:
    """``<path>.bin`` little-endian float32, frame-major, with a ``<path>.json`` shape sidecar."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(latents, dtype="<f4")
    bin_path, meta_path = base.with_suffix(".bin"), base.with_suffix(".json")
    bin_path.write_bytes(array.tobytes())
    meta_path.write_text(json.dumps({"shape": list(array.shape), "dtype": "<f4"}), encoding="utf-8")
    return bin_path, meta_path


def read_latents(path: Path | str) -> np.ndarray:
    base = Path(path)
    bin_path, meta_path = base.with_suffix(".bin"), base.with_suffix(".json")
    if not bin_path.exists() or not meta_path.exists():
        raise ArtifactError(f"Latent files not found: {bin_path}")
    shape = tuple(json.loads(meta_path.read_text(encoding="utf-8"))["shape"])
    flat = np.fromfile(bin_path, dtype="<f4")
    if flat.size != int(np.prod(shape)):
        raise ArtifactError(f"Corrupt latent file {bin_path}: {flat.size} values for shape {shape}")
    return flat.reshape(shape).astype(np.float32)


# tables


def write_csv(path: Path | str, rows: Iterable[Mapping[str, object]], columns: Optional[Sequence[str]] = None) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    dataframe = pd.DataFrame(list(rows), columns=list(columns) if columns else None)
    dataframe.to_csv(target, index=False)
    return target


@dataclass
class SQLResult:
    query_id: int
    sql: str
    dataframe: pd.DataFrame
    table_path: str
    preview_markdown: str


class SQLTool:
    """Single-statement SELECT queries against a CSV-loaded DuckDB table."""

    def __init__(
        self,
        data_path: str,
        table_name: str = "results",
        artifacts_dir: str = "artifacts",
        max_rows: int = 200,
    ) -> None:
        self.data_path = data_path
        self.table_name = table_name
        self.max_rows = max_rows
        self.artifacts_dir = Path(artifacts_dir)
        self._query_counter = count(1)
        self._connection = duckdb.connect()
        self._connection.execute(
            f"CREATE OR REPLACE TABLE {self.table_name} AS SELECT * FROM read_csv_auto(?)",
            [self.data_path],
        )

    def _prepare_query(self, query: str) -> str:
        stripped = query.strip()
        if not stripped.lower().startswith("select"):
            raise ValueError("Only SELECT statements are permitted.")
        if ";" in stripped[:-1]:
            raise ValueError("Multiple SQL statements are not permitted.")
        for keyword in FORBIDDEN_SQL:
            if re.search(rf"\b{keyword}\b", stripped, re.IGNORECASE):
                raise ValueError(f"Forbidden SQL keyword detected: {keyword}")
        if stripped.endswith(";"):
            stripped = stripped[:-1].strip()
        limit_match = re.search(r"\blimit\s+(\d+)\b", stripped, re.IGNORECASE)
        if limit_match is None:
            stripped = f"{stripped} LIMIT {self.max_rows}"
        elif int(limit_match.group(1)) > self.max_rows:
            stripped = re.sub(r"\blimit\s+\d+\b", f"LIMIT {self.max_rows}", stripped, flags=re.IGNORECASE, count=1)
        return stripped

    def run_query(self, query: str) -> SQLResult:
        query_id = next(self._query_counter)
        prepared = self._prepare_query(query)
        dataframe = self._connection.execute(prepared).df()
        table_path = self.artifacts_dir / "tables" / f"query_{query_id}.csv"
        table_path.parent.mkdir(parents=True, exist_ok=True)
        dataframe.to_csv(table_path, index=False)
        return SQLResult(
            query_id=query_id,
            sql=prepared,
            dataframe=dataframe,
            table_path=str(table_path),
            preview_markdown=dataframe.head(20).to_markdown(index=False),
        )


# charts


@dataclass
class ChartResult:
    chart_id: int
    chart_path: str


class ChartTool:
    """Line charts of numeric series, numbered per tool instance."""

    def __init__(self, artifacts_dir: str = "artifacts") -> None:
        self.artifacts_dir = Path(artifacts_dir)
        self._chart_counter = count(1)

    def line_chart(
        self,
        dataframe: pd.DataFrame,
        x: str,
        series: Sequence[str],
        title: str,
        name: str = "chart",
        group: Optional[str] = None,
        log_y: bool = False,
    ) -> ChartResult:
        chart_id = next(self._chart_counter)
        chart_path = self.artifacts_dir / "charts" / f"{name}_{chart_id}.png"
        chart_path.parent.mkdir(parents=True, exist_ok=True)

        plt.figure(figsize=(6, 4))
        if group is not None and group in dataframe.columns:
            for key, part in dataframe.groupby(group, sort=True):
                for column in series:
                    plt.plot(part[x], part[column], label=f"{column} ({group}={key})")
        else:
            for column in series:
                plt.plot(dataframe[x], dataframe[column], label=column, color=None if len(series) > 1 else "#4C78A8")
        if log_y:
            plt.yscale("log")
        plt.title(title)
        plt.xlabel(x)
        if len(series) > 1 or group is not None:
            plt.legend(fontsize="small")
        plt.tight_layout()
        plt.savefig(chart_path)
        plt.close()
        return ChartResult(chart_id=chart_id, chart_path=str(chart_path))


def series_frame(values: Mapping[str, Sequence[float]], index_name: str = "frame", start: int = 1) -> pd.DataFrame:
    length = max((len(column) for column in values.values()), default=0)
    data: Dict[str, object] = {index_name: list(range(start, start + length))}
    for key, column in values.items():
        data[key] = list(column) + [np.nan] * (length - len(column))
    return pd.DataFrame(data)
