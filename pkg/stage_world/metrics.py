"""Evaluation metrics: PSNR, proxy Frechet distance on handcrafted features, drift."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import fft, linalg

N_BANDS = 8
FEATURE_DIM = 2 + N_BANDS
PSNR_CAP = 100.0
FRECHET_EPS = 1e-6


class MetricsError(ValueError):
    """Raised when metric inputs are too short or misaligned."""


def _as_images(frames: np.ndarray) -> np.ndarray:
    """[n, c, h, w] or [n, h, w] to [n, h, w] by channel mean."""
    array = np.asarray(frames, dtype=np.float64)
    if array.ndim == 4:
        return array.mean(axis=1)
    if array.ndim == 3:
        return array
    raise MetricsError(f"expected [n, c, h, w] or [n, h, w] frames, got shape {array.shape}")


def _band_index(height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    radius = np.sqrt(rows * rows + cols * cols)
    max_radius = max(math.sqrt((height - 1) ** 2 + (width - 1) ** 2), 1.0)
    return np.minimum((radius / max_radius * N_BANDS).astype(int), N_BANDS - 1)


def frame_features(frames: np.ndarray) -> np.ndarray:
    """Mean, variance and 8 radial DCT band energies per frame: [n, 10]."""
    images = _as_images(frames)
    count, height, width = images.shape
    bands = _band_index(height, width).reshape(-1)
    features = np.zeros((count, FEATURE_DIM), dtype=np.float64)
    for index, image in enumerate(images):
        energy = fft.dctn(image, norm="ortho").reshape(-1) ** 2
        features[index, 0] = image.mean()
        features[index, 1] = image.var()
        features[index, 2:] = np.bincount(bands, weights=energy, minlength=N_BANDS) / image.size
    return features


def _trace_sqrt_product(sigma1: np.ndarray, sigma2: np.ndarray) -> float:
    """tr((sigma1 sigma2)^(1/2)) through symmetric square roots."""
    values, vectors = linalg.eigh(sigma1)
    root = (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T
    inner = root @ sigma2 @ root
    inner_values = linalg.eigh((inner + inner.T) / 2.0, eigvals_only=True)
    return float(np.sqrt(np.clip(inner_values, 0.0, None)).sum())


def frechet_from_features(features1: np.ndarray, features2: np.ndarray, eps: float = FRECHET_EPS) -> float:
    if len(features1) < 2 or len(features2) < 2:
        raise MetricsError("the Frechet distance needs at least 2 samples per set")
    mu1, mu2 = features1.mean(axis=0), features2.mean(axis=0)
    offset = eps * np.eye(features1.shape[1])
    sigma1 = np.atleast_2d(np.cov(features1, rowvar=False)) + offset
    sigma2 = np.atleast_2d(np.cov(features2, rowvar=False)) + offset
    diff = mu1 - mu2
    value = diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * _trace_sqrt_product(sigma1, sigma2)
    return float(max(value, 0.0))


def proxy_frechet(generated: np.ndarray, reference: np.ndarray) -> float:
    return frechet_from_features(frame_features(generated), frame_features(reference))


def segment_features(frames: np.ndarray, segment: int = 16) -> np.ndarray:
    """Per non-overlapping segment: mean frame features joined with mean |frame difference| features."""
    images = _as_images(frames)
    if segment < 2:
        raise MetricsError(f"segment length must be at least 2, got {segment}")
    rows = []
    for start in range(0, len(images) - segment + 1, segment):
        chunk = images[start : start + segment]
        motion = np.abs(np.diff(chunk, axis=0))
        rows.append(np.concatenate([frame_features(chunk).mean(axis=0), frame_features(motion).mean(axis=0)]))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2 * FEATURE_DIM)


def proxy_frechet_segments(generated: np.ndarray, reference: np.ndarray, segment: int = 16) -> float:
    return frechet_from_features(segment_features(generated, segment), segment_features(reference, segment))


@dataclass(frozen=True)
class DriftResult:
    series: List[float]
    slope: float


def drift_metric(generated: np.ndarray, ground_truth: np.ndarray) -> DriftResult:
    """d_T = mean |features(gen_T) - features(gt_T)| and its least-squares slope over T."""
    if len(generated) != len(ground_truth):
        raise MetricsError(f"drift needs aligned sequences, got {len(generated)} and {len(ground_truth)}")
    if len(generated) == 0:
        return DriftResult(series=[], slope=0.0)
    series = np.abs(frame_features(generated) - frame_features(ground_truth)).mean(axis=1)
    slope = float(np.polyfit(np.arange(len(series), dtype=np.float64), series, 1)[0]) if len(series) > 1 else 0.0
    return DriftResult(series=[float(value) for value in series], slope=slope)


def psnr(generated: np.ndarray, reference: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(generated, np.float64) - np.asarray(reference, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


@dataclass
class MetricsReport:
    psnr: List[float] = field(default_factory=list)
    proxy_frechet: Optional[float] = None
    proxy_frechet_segments: Optional[float] = None
    drift: List[float] = field(default_factory=list)
    drift_slope: Optional[float] = None
    frame_ms: List[float] = field(default_factory=list)
    buffer_bytes: List[int] = field(default_factory=list)

    @property
    def mean_psnr(self) -> Optional[float]:
        return float(np.mean(self.psnr)) if self.psnr else None

    def summary(self) -> Dict[str, Optional[float]]:
        return {
            "frames": len(self.frame_ms),
            "mean_psnr": self.mean_psnr,
            "proxy_frechet": self.proxy_frechet,
            "proxy_frechet_segments": self.proxy_frechet_segments,
            "drift_slope": self.drift_slope,
            "mean_frame_ms": float(np.mean(self.frame_ms)) if self.frame_ms else None,
            "peak_buffer_bytes": max(self.buffer_bytes) if self.buffer_bytes else 0,
        }

    def to_dict(self) -> Dict[str, object]:
        payload = asdict(self)
        payload["summary"] = self.summary()
        return payload

    def write_json(self, path: Path | str) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return target


def evaluate(
    generated: np.ndarray,
    ground_truth: Optional[np.ndarray] = None,
    frame_ms: Sequence[float] = (),
    buffer_bytes: Sequence[int] = (),
    pooled_generated: Optional[np.ndarray] = None,
    pooled_reference: Optional[np.ndarray] = None,
    segment: int = 16,
) -> MetricsReport:
    """PSNR and drift need aligned ground truth; the Frechet metrics use the pooled sets when given."""
    report = MetricsReport(frame_ms=[float(value) for value in frame_ms], buffer_bytes=[int(value) for value in buffer_bytes])
    if ground_truth is None:
        return report
    ground_truth = ground_truth[: len(generated)]
    report.psnr = [psnr(gen, ref) for gen, ref in zip(generated, ground_truth)]
    drift = drift_metric(generated, ground_truth)
    report.drift, report.drift_slope = drift.series, drift.slope
    pooled_gen = generated if pooled_generated is None else pooled_generated
    pooled_ref = ground_truth if pooled_reference is None else pooled_reference
    if len(pooled_gen) >= 2 and len(pooled_ref) >= 2:
        report.proxy_frechet = proxy_frechet(pooled_gen, pooled_ref)
    if len(pooled_gen) >= 2 * segment and len(pooled_ref) >= 2 * segment:
        report.proxy_frechet_segments = proxy_frechet_segments(pooled_gen, pooled_ref, segment)
    return report
