"""Procedural driving scenes: kinematics, rendering, latents and dataset files."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from stage_world import geometry as geo
from stage_world.numerics import make_rng

DATASET_VERSION = 1
DT = 1.0 / 12.0
FRAME_SIZE = 128
LATENT_FACTOR = 4
LATENT_SIZE = FRAME_SIZE // LATENT_FACTOR
LANE_WIDTH = 3.5
WORKSPACE_X = (0.0, 100.0)
WORKSPACE_Y = (-20.0, 20.0)
VEHICLE_SIZE = (4.5, 1.8, 1.5)
PEDESTRIAN_SIZE = (0.6, 0.6, 1.7)
LANE_VALUE = 1.0


class DatasetError(RuntimeError):
    """Raised for missing, truncated or mismatched dataset files."""

    def __init__(self, message: str, path: Path | str) -> None:
        super().__init__(f"{message}: {path}")
        self.path = str(path)


@dataclass(frozen=True)
class AgentSpec:
    box: geo.Box3D
    speed: float = 0.0
    yaw_rate: float = 0.0

    def to_dict(self) -> Dict[str, object]:
        return {"box": self.box.to_dict(), "speed": self.speed, "yaw_rate": self.yaw_rate}

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "AgentSpec":
        return cls(
            box=geo.Box3D.from_dict(payload["box"]),
            speed=float(payload["speed"]),
            yaw_rate=float(payload["yaw_rate"]),
        )


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    n_frames: int
    ego_speed: float = 0.0
    ego_yaw_rate: float = 0.0
    lanes: Tuple[geo.Polyline, ...] = ()
    agents: Tuple[AgentSpec, ...] = ()

    def __post_init__(self) -> None:
        if self.n_frames < 2:
            raise ValueError(f"a scene needs at least 2 frames, got {self.n_frames}")
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "agents", tuple(self.agents))
        for agent in self.agents:
            x, y, _ = agent.box.center
            if not (WORKSPACE_X[0] <= x <= WORKSPACE_X[1] and WORKSPACE_Y[0] <= y <= WORKSPACE_Y[1]):
                raise ValueError(f"agent at ({x:.1f}, {y:.1f}) outside the 100 m x 40 m workspace")

    def to_dict(self) -> Dict[str, object]:
        return {
            "seed": self.seed,
            "n_frames": self.n_frames,
            "ego_speed": self.ego_speed,
            "ego_yaw_rate": self.ego_yaw_rate,
            "lanes": [line.to_dict() for line in self.lanes],
            "agents": [agent.to_dict() for agent in self.agents],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "SceneSpec":
        return cls(
            seed=int(payload["seed"]),
            n_frames=int(payload["n_frames"]),
            ego_speed=float(payload["ego_speed"]),
            ego_yaw_rate=float(payload["ego_yaw_rate"]),
            lanes=tuple(geo.Polyline.from_dict(line) for line in payload["lanes"]),
            agents=tuple(AgentSpec.from_dict(agent) for agent in payload["agents"]),
        )


@dataclass(frozen=True)
class WorldState:
    """Ego pose and agent states at one frame; lanes are static."""

    frame_index: int
    ego: geo.Pose
    ego_speed: float
    ego_yaw_rate: float
    agents: Tuple[AgentSpec, ...]
    lanes: Tuple[geo.Polyline, ...]

    @property
    def boxes(self) -> List[geo.Box3D]:
        return [agent.box for agent in self.agents]

    @classmethod
    def initial(cls, spec: SceneSpec) -> "WorldState":
        return cls(
            frame_index=0,
            ego=geo.Pose(),
            ego_speed=spec.ego_speed,
            ego_yaw_rate=spec.ego_yaw_rate,
            agents=spec.agents,
            lanes=spec.lanes,
        )


def _advance_box(box: geo.Box3D, speed: float, yaw_rate: float, dt: float) -> geo.Box3D:
    x, y, z = box.center
    return replace(
        box,
        center=(x + speed * math.cos(box.yaw) * dt, y + speed * math.sin(box.yaw) * dt, z),
        yaw=geo.wrap_angle(box.yaw + yaw_rate * dt),
    )


def advance(state: WorldState, dt: float = DT) -> WorldState:
    """One Euler step: constant speed along the heading, constant yaw rate."""
    ego = state.ego
    next_ego = geo.Pose(
        x=ego.x + state.ego_speed * math.cos(ego.yaw) * dt,
        y=ego.y + state.ego_speed * math.sin(ego.yaw) * dt,
        z=ego.z,
        yaw=ego.yaw + state.ego_yaw_rate * dt,
    )
    agents = tuple(
        replace(agent, box=_advance_box(agent.box, agent.speed, agent.yaw_rate, dt)) for agent in state.agents
    )
    return replace(state, frame_index=state.frame_index + 1, ego=next_ego, agents=agents)


@dataclass(eq=False)
class SceneSequence:
    spec: SceneSpec
    poses: List[geo.Pose]
    boxes: List[List[geo.Box3D]]
    frames: np.ndarray
    latents: np.ndarray
    rig: geo.CameraRig = field(default_factory=geo.default_rig)

    def __post_init__(self) -> None:
        counts = {len(self.poses), len(self.boxes), len(self.frames), len(self.latents)}
        if counts != {self.spec.n_frames}:
            raise ValueError(f"per-frame lists disagree with n_frames={self.spec.n_frames}: {sorted(counts)}")

    @property
    def n_frames(self) -> int:
        return self.spec.n_frames

    @property
    def lanes(self) -> Tuple[geo.Polyline, ...]:
        return self.spec.lanes

    def state_at(self, frame_index: int) -> WorldState:
        agents = tuple(
            replace(agent, box=box) for agent, box in zip(self.spec.agents, self.boxes[frame_index])
        )
        return WorldState(
            frame_index=frame_index,
            ego=self.poses[frame_index],
            ego_speed=self.spec.ego_speed,
            ego_yaw_rate=self.spec.ego_yaw_rate,
            agents=agents,
            lanes=self.spec.lanes,
        )


# scene synthesis


def lane_layout(n_lanes: int, crossing_x: Optional[float] = None) -> Tuple[geo.Polyline, ...]:
    """``n_lanes`` straight boundaries along +x, plus an optional crossing strip across them."""
    xs = np.arange(-10.0, 200.0 + 1e-9, 10.0)
    lines = []
    for index in range(n_lanes):
        y = (index - (n_lanes - 1) / 2.0) * LANE_WIDTH
        lines.append(geo.Polyline(points=tuple((float(x), y, 0.0) for x in xs), kind=geo.PolylineKind.LANE_BOUNDARY))
    if crossing_x is not None:
        half = (n_lanes - 1) / 2.0 * LANE_WIDTH + 1.0
        for offset in (-1.5, 1.5):
            lines.append(
                geo.Polyline(
                    points=((crossing_x + offset, -half, 0.0), (crossing_x + offset, half, 0.0)),
                    kind=geo.PolylineKind.PEDESTRIAN_CROSSING,
                )
            )
    return tuple(lines)


def random_scene_spec(seed: int, n_frames: int) -> SceneSpec:
    rng = make_rng(seed, "scene")
    n_lanes = int(rng.integers(2, 5))
    crossing_x = float(rng.uniform(30.0, 80.0)) if rng.random() < 0.5 else None
    lanes = lane_layout(n_lanes, crossing_x)
    lane_centres = [(index - (n_lanes - 2) / 2.0) * LANE_WIDTH for index in range(n_lanes - 1)]
    agents = []
    for _ in range(int(rng.integers(2, 6))):
        if crossing_x is not None and rng.random() < 0.3:
            heading = math.pi / 2 if rng.random() < 0.5 else -math.pi / 2
            box = geo.Box3D(
                center=(crossing_x, float(rng.uniform(-6.0, 6.0)), PEDESTRIAN_SIZE[2] / 2),
                size=PEDESTRIAN_SIZE,
                yaw=heading,
                object_class=geo.ObjectClass.PEDESTRIAN,
            )
            agents.append(AgentSpec(box=box, speed=1.2, yaw_rate=0.0))
            continue
        lane_y = lane_centres[int(rng.integers(0, len(lane_centres)))]
        box = geo.Box3D(
            center=(float(rng.uniform(8.0, 90.0)), lane_y + float(rng.uniform(-0.3, 0.3)), VEHICLE_SIZE[2] / 2),
            size=VEHICLE_SIZE,
            yaw=0.0,
            object_class=geo.ObjectClass.VEHICLE,
        )
        agents.append(AgentSpec(box=box, speed=float(rng.uniform(2.0, 12.0)), yaw_rate=0.0))
    return SceneSpec(
        seed=seed,
        n_frames=n_frames,
        ego_speed=float(rng.uniform(4.0, 10.0)),
        ego_yaw_rate=float(rng.uniform(-0.03, 0.03)),
        lanes=lanes,
        agents=tuple(agents),
    )


def background(height: int = FRAME_SIZE, width: int = FRAME_SIZE, horizon: Optional[float] = None) -> np.ndarray:
    """Sky brightening toward the horizon, ground brightening toward the camera."""
    horizon = height / 2.0 if horizon is None else horizon
    rows = np.arange(height, dtype=np.float64) + 0.5
    sky = 0.55 + 0.25 * np.clip(rows / horizon, 0.0, 1.0)
    ground = 0.15 + 0.25 * np.clip((rows - horizon) / max(height - horizon, 1.0), 0.0, 1.0)
    column = np.where(rows < horizon, sky, ground)
    return np.repeat(column[:, None], width, axis=1).astype(np.float32)


def agent_shade(depth: float) -> float:
    return 0.1 + 0.8 / (1.0 + max(depth, 0.0) / 10.0)


def render_frame(
    ego: geo.Pose,
    agents: Sequence[geo.Box3D],
    lanes: Sequence[geo.Polyline],
    intrinsics: geo.CameraIntrinsics,
    ego_to_camera: np.ndarray,
    z_near: float = geo.Z_NEAR,
) -> np.ndarray:
    """Painter's-algorithm grayscale frame [1, H, W] in [0, 1]."""
    height, width = intrinsics.height, intrinsics.width
    canvas = background(height, width, horizon=intrinsics.cy)
    for line in lanes:
        geo.draw_polyline(canvas, line, ego, ego_to_camera, intrinsics, z_near, value=LANE_VALUE)
    visible = geo.visible_box_polygons(agents, ego, ego_to_camera, intrinsics, z_near)
    for polygon, _, depth in sorted(visible, key=lambda item: -item[2]):
        canvas[geo.polygon_mask(polygon, height, width)] = agent_shade(depth)
    return canvas[None, :, :]


def encode_latent(frame: np.ndarray, factor: int = LATENT_FACTOR) -> np.ndarray:
    """Fixed average-pool encoder."""
    channels, height, width = frame.shape
    pooled = frame.reshape(channels, height // factor, factor, width // factor, factor).mean(axis=(2, 4))
    return pooled.astype(np.float32)


def decode_latent(latent: np.ndarray, factor: int = LATENT_FACTOR) -> np.ndarray:
    return np.repeat(np.repeat(latent, factor, axis=1), factor, axis=2).astype(np.float32)


def render_states(states: Sequence[WorldState], rig: geo.CameraRig) -> np.ndarray:
    frames = [
        render_frame(state.ego, state.boxes, state.lanes, rig.intrinsics, rig.ego_to_camera, rig.z_near)
        for state in states
    ]
    return np.stack(frames).astype(np.float32)


def gen_scene(spec: SceneSpec, rig: Optional[geo.CameraRig] = None) -> SceneSequence:
    """Integrate the scene at 12 Hz and render every frame; deterministic in ``spec``."""
    rig = rig or geo.default_rig()
    states = [WorldState.initial(spec)]
    for _ in range(spec.n_frames - 1):
        states.append(advance(states[-1]))
    frames = render_states(states, rig)
    latents = np.stack([encode_latent(frame) for frame in frames])
    return SceneSequence(
        spec=spec,
        poses=[state.ego for state in states],
        boxes=[state.boxes for state in states],
        frames=frames,
        latents=latents,
        rig=rig,
    )


def gen_scenes(specs: Sequence[SceneSpec], rig: Optional[geo.CameraRig] = None, threads: int = 1) -> List[SceneSequence]:
    if threads <= 1:
        return [gen_scene(spec, rig) for spec in specs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda spec: gen_scene(spec, rig), specs))


# dataset files


def write_dataset(path: Path | str, scenes: Sequence[SceneSequence], store_frames: bool = True) -> Path:
    """Directory with meta.json, latents.bin, annotations.json and optionally frames.bin."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if not scenes:
        raise DatasetError("refusing to write an empty dataset", root)
    rig = scenes[0].rig
    meta = {
        "version": DATASET_VERSION,
        "scenes": [scene.spec.to_dict() for scene in scenes],
        "intrinsics": rig.intrinsics.to_dict(),
        "T_ego2cam": [float(v) for v in np.asarray(rig.ego_to_camera).reshape(-1)],
        "z_near": rig.z_near,
        "frame_shape": list(scenes[0].frames.shape[1:]),
        "latent_shape": list(scenes[0].latents.shape[1:]),
        "store_frames": store_frames,
    }
    latents = np.concatenate([scene.latents for scene in scenes]).astype("<f4")
    (root / "latents.bin").write_bytes(latents.tobytes())
    frames_path = root / "frames.bin"
    if store_frames:
        frames = np.concatenate([scene.frames for scene in scenes]).astype("<f4")
        frames_path.write_bytes(frames.tobytes())
    elif frames_path.exists():
        frames_path.unlink()
    annotations = {
        "scenes": [
            geo.annotations_to_dict(scene.poses, scene.boxes, [list(scene.lanes)] * scene.n_frames, scene.rig)
            for scene in scenes
        ]
    }
    (root / "annotations.json").write_text(json.dumps(annotations, sort_keys=True), encoding="utf-8")
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return root


def _read_json(path: Path) -> Dict[str, object]:
    if not path.exists():
        raise DatasetError("dataset file not found", path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt JSON ({exc.msg})", path) from exc


def _read_block(path: Path, shape: Tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise DatasetError("dataset file not found", path)
    expected = int(np.prod(shape))
    flat = np.fromfile(path, dtype="<f4")
    if flat.size != expected:
        raise DatasetError(f"corrupt file, expected {expected} values, found {flat.size}", path)
    return flat.reshape(shape).astype(np.float32)


def read_dataset(path: Path | str) -> List[SceneSequence]:
    """Load every scene; frames are re-rendered from the annotations unless frames.bin was stored."""
    root = Path(path)
    meta = _read_json(root / "meta.json")
    if meta.get("version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {meta.get('version')}", root / "meta.json")
    try:
        specs = [SceneSpec.from_dict(item) for item in meta["scenes"]]
        rig = geo.CameraRig.from_dict(meta)
        frame_shape = tuple(meta["frame_shape"])
        latent_shape = tuple(meta["latent_shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed metadata ({exc})", root / "meta.json") from exc
    total = sum(spec.n_frames for spec in specs)
    latents = _read_block(root / "latents.bin", (total,) + latent_shape)
    frames = _read_block(root / "frames.bin", (total,) + frame_shape) if meta.get("store_frames") else None
    annotations = _read_json(root / "annotations.json")
    scene_payloads = annotations.get("scenes", [])
    if len(scene_payloads) != len(specs):
        raise DatasetError(f"{len(scene_payloads)} annotated scenes, meta lists {len(specs)}", root / "annotations.json")

    scenes: List[SceneSequence] = []
    offset = 0
    for spec, payload in zip(specs, scene_payloads):
        poses, boxes, _, _ = geo.annotations_from_dict(payload)
        if len(poses) != spec.n_frames:
            raise DatasetError(f"scene {spec.seed} has {len(poses)} annotated frames", root / "annotations.json")
        end = offset + spec.n_frames
        if frames is not None:
            scene_frames = frames[offset:end]
        else:
            scene_frames = np.stack(
                [render_frame(pose, frame_boxes, spec.lanes, rig.intrinsics, rig.ego_to_camera, rig.z_near)
                 for pose, frame_boxes in zip(poses, boxes)]
            ).astype(np.float32)
        scenes.append(
            SceneSequence(spec=spec, poses=poses, boxes=boxes, frames=scene_frames, latents=latents[offset:end], rig=rig)
        )
        offset = end
    return scenes
