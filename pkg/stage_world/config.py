"""Run configuration loaded from run-config.json."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from stage_world import geometry as geo
from stage_world import htft
from stage_world import scheduler as sch
from stage_world.denoiser import UNetConfig

SEED_ENV = "STAGE_SEED"
RUN_CONFIG_NAME = "run-config.json"


class ConfigError(ValueError):
    """Raised for unknown keys or out-of-range values in a run config."""


@dataclass(frozen=True)
class ScheduleConfig:
    # Euler steps; the reference sampler used 64
    n_steps: int = 16
    sigma_min: float = sch.SIGMA_MIN
    sigma_max: float = sch.SIGMA_MAX
    rho: float = sch.RHO

    def build(self) -> sch.NoiseSchedule:
        return sch.edm_sigmas(self.n_steps, self.sigma_min, self.sigma_max, self.rho)


@dataclass(frozen=True)
class StreamConfig:
    capacity: int = htft.DEFAULT_CAPACITY
    offsets: Tuple[int, ...] = htft.DEFAULT_OFFSETS
    fusion_enabled: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "offsets", tuple(self.offsets))

    def selection(self) -> htft.SelectionSet:
        return htft.SelectionSet(self.offsets)


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    keep_range: Tuple[float, float] = (0.3, 1.0)
    cond_dropout_p: float = 0.05
    cond_noise_sigma: float = 0.02

    def __post_init__(self) -> None:
        object.__setattr__(self, "keep_range", tuple(self.keep_range))


@dataclass(frozen=True)
class LossWeightConfig:
    enabled: bool = True
    k: float = geo.DEFAULT_K
    c: float = geo.DEFAULT_C


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    steps: int = 200
    base_lr: float = 1e-3
    stage3_lr_divisor: float = 5.0
    log_every: int = 10
    # kinematic predictor when False
    gt_conditions: bool = True

    def lr_for(self, stage: int) -> float:
        return self.base_lr / self.stage3_lr_divisor if stage == 3 else self.base_lr


@dataclass(frozen=True)
class SynthConfig:
    train_scenes: int = 8
    eval_scenes: int = 2
    n_frames: int = 48
    store_frames: bool = True


@dataclass(frozen=True)
class GenerateConfig:
    frames: int = 16
    draws: int = 1
    refresh_every: int = 16


@dataclass(frozen=True)
class PathsConfig:
    dataset: str = "data"
    runs: str = "runs"


SECTIONS: Dict[str, type] = {
    "schedule": ScheduleConfig,
    "stream": StreamConfig,
    "unet": UNetConfig,
    "augment": AugmentConfig,
    "loss_weights": LossWeightConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "generate": GenerateConfig,
    "paths": PathsConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss_weights: LossWeightConfig = field(default_factory=LossWeightConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        problems = []
        if self.train.stage not in (1, 2, 3):
            problems.append(f"train.stage must be 1, 2 or 3, got {self.train.stage}")
        if self.train.steps < 0:
            problems.append("train.steps must be non-negative")
        if self.train.log_every < 1:
            problems.append("train.log_every must be at least 1")
        if self.train.base_lr <= 0 or self.train.stage3_lr_divisor <= 0:
            problems.append("learning rates must be positive")
        for name, value in (
            ("augment.cond_dropout_p", self.augment.cond_dropout_p),
            ("unet.dropout", self.unet.dropout),
        ):
            if not 0.0 <= value <= 1.0:
                problems.append(f"{name} must be in [0, 1], got {value}")
        low, high = self.augment.keep_range
        if not 0.0 <= low <= high <= 1.0:
            problems.append(f"augment.keep_range must satisfy 0 <= low <= high <= 1, got {self.augment.keep_range}")
        if self.augment.cond_noise_sigma < 0:
            problems.append("augment.cond_noise_sigma must be non-negative")
        if self.schedule.n_steps < 2 or not 0 < self.schedule.sigma_min < self.schedule.sigma_max:
            problems.append("schedule needs n_steps >= 2 and 0 < sigma_min < sigma_max")
        if self.stream.capacity < 1:
            problems.append("stream.capacity must be at least 1")
        if any(not -self.stream.capacity <= offset <= -1 for offset in self.stream.offsets):
            problems.append(f"stream.offsets must lie in [-{self.stream.capacity}, -1], got {self.stream.offsets}")
        if len(set(self.stream.offsets)) != len(self.stream.offsets):
            problems.append("stream.offsets must be distinct")
        if self.synth.n_frames < 2 or self.synth.train_scenes < 0 or self.synth.eval_scenes < 0:
            problems.append("synth needs n_frames >= 2 and non-negative scene counts")
        if self.generate.frames < 0 or self.generate.draws < 1 or self.generate.refresh_every < 1:
            problems.append("generate needs frames >= 0, draws >= 1 and refresh_every >= 1")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def with_stage(self, stage: int) -> "RunConfig":
        return replace(self, train=replace(self.train, stage=stage)).validate()

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            section = getattr(self, name)
            payload[name] = section.to_dict() if isinstance(section, UNetConfig) else _plain(asdict(section))
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "RunConfig":
        unknown = set(payload) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: Dict[str, Any] = {"seed": int(payload.get("seed", 0))}
        for name, section_cls in SECTIONS.items():
            values = payload.get(name, {})
            if not isinstance(values, Mapping):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {item.name for item in fields(section_cls)}
            extra = set(values) - allowed
            if extra:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}")
            try:
                kwargs[name] = section_cls(**dict(values))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        return cls(**kwargs).validate()


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def apply_env(config: RunConfig, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return config
    try:
        return replace(config, seed=int(raw))
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def load_run_config(path: Optional[Path | str] = None, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Defaults when ``path`` is None; the seed env var always wins."""
    if path is None:
        return apply_env(RunConfig().validate(), environ)
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}")
    try:
        payload = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file is not valid JSON: {config_path}: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"Config file must hold a JSON object: {config_path}")
    return apply_env(RunConfig.from_dict(payload), environ)


def save_run_config(config: RunConfig, directory: Path | str) -> Path:
    path = Path(directory) / RUN_CONFIG_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path
