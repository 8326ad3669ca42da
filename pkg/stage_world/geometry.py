"""Scene geometry: pinhole projection, convex hulls, clipping and loss weight maps.

World frame: x forward, y left, z up (meters). Camera frame: X right, Y down,
Z along the optical axis. Pixel coordinates are (u, v) with pixel (row i,
column j) centred at (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

Point3 = Tuple[float, float, float]
Point2 = Tuple[float, float]

Z_NEAR = 0.1
DEFAULT_K = 1.0
DEFAULT_C = 0.5
MIN_HULL_AREA = 1.0

# (a, b) corner index pairs of the 12 cuboid edges, for the corner order of box_corners
BOX_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)


class GeometryError(ValueError):
    """Raised for invalid geometric inputs."""


class ObjectClass(str, Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"


class PolylineKind(str, Enum):
    LANE_BOUNDARY = "lane_boundary"
    PEDESTRIAN_CROSSING = "pedestrian_crossing"


def wrap_angle(angle: float) -> float:
    """Map an angle to [-pi, pi); angles already in range are returned unchanged."""
    if -math.pi <= angle < math.pi:
        return angle
    wrapped = math.fmod(angle + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of the same camera sampled at ``factor`` times the resolution."""
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )

    def to_dict(self) -> Dict[str, float]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, float]) -> "CameraIntrinsics":
        return cls(
            fx=float(payload["fx"]),
            fy=float(payload["fy"]),
            cx=float(payload["cx"]),
            cy=float(payload["cy"]),
            width=int(payload["width"]),
            height=int(payload["height"]),
        )


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def position(self) -> Point3:
        return (self.x, self.y, self.z)

    def to_dict(self) -> Dict[str, float]:
        return {"x": self.x, "y": self.y, "z": self.z, "yaw": self.yaw}

    @classmethod
    def from_dict(cls, payload: Dict[str, float]) -> "Pose":
        return cls(x=float(payload["x"]), y=float(payload["y"]), z=float(payload["z"]), yaw=float(payload["yaw"]))


@dataclass(frozen=True)
class Box3D:
    center: Point3
    size: Point3
    yaw: float = 0.0
    object_class: ObjectClass = ObjectClass.VEHICLE

    def __post_init__(self) -> None:
        if any(extent <= 0 for extent in self.size):
            raise GeometryError(f"box size must be positive, got {self.size}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "object_class", ObjectClass(self.object_class))

    def to_dict(self) -> Dict[str, object]:
        return {
            "center": list(self.center),
            "size": list(self.size),
            "yaw": self.yaw,
            "class": self.object_class.value,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "Box3D":
        return cls(
            center=tuple(payload["center"]),
            size=tuple(payload["size"]),
            yaw=float(payload["yaw"]),
            object_class=ObjectClass(payload["class"]),
        )


@dataclass(frozen=True)
class Polyline:
    points: Tuple[Point3, ...]
    kind: PolylineKind = PolylineKind.LANE_BOUNDARY

    def __post_init__(self) -> None:
        if len(self.points) < 2:
            raise GeometryError("a polyline needs at least 2 points")
        object.__setattr__(self, "points", tuple(tuple(float(v) for v in point) for point in self.points))
        object.__setattr__(self, "kind", PolylineKind(self.kind))

    def to_dict(self) -> Dict[str, object]:
        return {"points": [list(point) for point in self.points], "kind": self.kind.value}

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "Polyline":
        return cls(points=tuple(tuple(point) for point in payload["points"]), kind=PolylineKind(payload["kind"]))


@dataclass(frozen=True)
class Polygon2D:
    vertices: Tuple[Point2, ...] = ()
    degenerate: bool = False

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) < 3

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class WeightMap:
    values: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.values.shape)

    @classmethod
    def uniform(cls, height: int, width: int) -> "WeightMap":
        return cls(values=np.ones((height, width), dtype=np.float32))


def default_ego_to_camera(height: float = 1.5) -> np.ndarray:
    """Front camera mounted ``height`` meters above the ego origin, looking along +x."""
    return np.array(
        [
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, height],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
        dtype=np.float64,
    )


@dataclass(frozen=True, eq=False)
class CameraRig:
    intrinsics: CameraIntrinsics
    ego_to_camera: np.ndarray = field(default_factory=default_ego_to_camera)
    z_near: float = Z_NEAR

    def latent_intrinsics(self, factor: int) -> CameraIntrinsics:
        return self.intrinsics.scaled(1.0 / factor)

    def to_dict(self) -> Dict[str, object]:
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "T_ego2cam": [float(v) for v in np.asarray(self.ego_to_camera).reshape(-1)],
            "z_near": self.z_near,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "CameraRig":
        return cls(
            intrinsics=CameraIntrinsics.from_dict(payload["intrinsics"]),
            ego_to_camera=np.asarray(payload["T_ego2cam"], dtype=np.float64).reshape(4, 4),
            z_near=float(payload.get("z_near", Z_NEAR)),
        )


def default_rig() -> CameraRig:
    return CameraRig(intrinsics=CameraIntrinsics(fx=128.0, fy=128.0, cx=64.0, cy=64.0, width=128, height=128))


# 3-D helpers


def box_corners(box: Box3D) -> np.ndarray:
    """The 8 world-frame corners of the yaw-rotated cuboid, bottom face first."""
    length, width, height = box.size
    template = np.array(
        [
            [0.5, 0.5, -0.5], [0.5, -0.5, -0.5], [-0.5, -0.5, -0.5], [-0.5, 0.5, -0.5],
            [0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [-0.5, -0.5, 0.5], [-0.5, 0.5, 0.5],
        ]
    ) * np.array([length, width, height])
    cos_yaw, sin_yaw = math.cos(box.yaw), math.sin(box.yaw)
    rotation = np.array([[cos_yaw, -sin_yaw, 0.0], [sin_yaw, cos_yaw, 0.0], [0.0, 0.0, 1.0]])
    return template @ rotation.T + np.asarray(box.center)


def world_to_camera(points: np.ndarray, ego_pose: Pose, ego_to_camera: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    offset = points - np.asarray(ego_pose.position)
    cos_yaw, sin_yaw = math.cos(ego_pose.yaw), math.sin(ego_pose.yaw)
    ego = np.stack(
        [
            cos_yaw * offset[:, 0] + sin_yaw * offset[:, 1],
            -sin_yaw * offset[:, 0] + cos_yaw * offset[:, 1],
            offset[:, 2],
            np.ones(len(offset)),
        ],
        axis=1,
    )
    return (ego @ np.asarray(ego_to_camera, dtype=np.float64).T)[:, :3]


def pinhole(camera_points: np.ndarray, intrinsics: CameraIntrinsics, z_near: float = Z_NEAR) -> Tuple[np.ndarray, np.ndarray]:
    camera_points = np.asarray(camera_points, dtype=np.float64).reshape(-1, 3)
    depth = camera_points[:, 2]
    visible = depth > z_near
    safe = np.where(visible, depth, 1.0)
    u = intrinsics.fx * camera_points[:, 0] / safe + intrinsics.cx
    v = intrinsics.fy * camera_points[:, 1] / safe + intrinsics.cy
    pixels = np.stack([u, v], axis=1)
    pixels[~visible] = np.nan
    return pixels, visible


def project(
    points: np.ndarray,
    ego_pose: Pose,
    ego_to_camera: np.ndarray,
    intrinsics: CameraIntrinsics,
    z_near: float = Z_NEAR,
) -> Tuple[np.ndarray, np.ndarray]:
    """World points to pixels; points with depth <= z_near are flagged invisible (NaN pixels)."""
    return pinhole(world_to_camera(points, ego_pose, ego_to_camera), intrinsics, z_near)


def _clip_segment_near(p0: np.ndarray, p1: np.ndarray, z_near: float) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    in0, in1 = p0[2] > z_near, p1[2] > z_near
    if in0 and in1:
        return p0, p1
    if not in0 and not in1:
        return None
    t = (z_near - p0[2]) / (p1[2] - p0[2])
    crossing = p0 + t * (p1 - p0)
    crossing[2] = z_near + 1e-9
    return (p0, crossing) if in0 else (crossing, p1)


def project_box_hull(
    box: Box3D,
    ego_pose: Pose,
    ego_to_camera: np.ndarray,
    intrinsics: CameraIntrinsics,
    z_near: float = Z_NEAR,
) -> Optional[Polygon2D]:
    """Convex hull of the projected box; edges crossing z_near are cut at z_near."""
    corners = world_to_camera(box_corners(box), ego_pose, ego_to_camera)
    in_front = corners[:, 2] > z_near
    if not in_front.any():
        return None
    kept = [corners[index] for index in range(8) if in_front[index]]
    for a, b in BOX_EDGES:
        if in_front[a] != in_front[b]:
            clipped = _clip_segment_near(corners[a], corners[b], z_near)
            if clipped is not None:
                kept.append(clipped[1] if in_front[a] else clipped[0])
    pixels, _ = pinhole(np.asarray(kept), intrinsics, z_near=z_near * 0.5)
    return convex_hull(pixels)


# 2-D polygons


def _cross(o: Point2, a: Point2, b: Point2) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points: Iterable[Sequence[float]]) -> Polygon2D:
    """Counter-clockwise hull by Andrew's monotone chain; collinear points are dropped."""
    unique = sorted({(float(p[0]), float(p[1])) for p in points})
    if not unique:
        raise GeometryError("convex_hull needs at least one point")
    if len(unique) < 3:
        return Polygon2D(vertices=tuple(unique), degenerate=True)

    lower: List[Point2] = []
    for point in unique:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], point) <= 0:
            lower.pop()
        lower.append(point)
    upper: List[Point2] = []
    for point in reversed(unique):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], point) <= 0:
            upper.pop()
        upper.append(point)
    hull = lower[:-1] + upper[:-1]
    return Polygon2D(vertices=tuple(hull), degenerate=len(hull) < 3)


def polygon_area(polygon: Polygon2D) -> float:
    """Shoelace area; fewer than 3 vertices gives 0."""
    if len(polygon.vertices) < 3:
        return 0.0
    pts = polygon.as_array()
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def clip_polygon(polygon: Polygon2D, rect: Tuple[float, float, float, float]) -> Polygon2D:
    """Sutherland-Hodgman clip against the axis-aligned rect (x_min, y_min, x_max, y_max)."""
    x_min, y_min, x_max, y_max = rect
    output: List[Point2] = list(polygon.vertices)
    if len(output) < 3:
        return Polygon2D()

    # (inside test, intersection with the boundary line) per rect edge
    def along_x(bound: float) -> Callable[[Point2, Point2], Point2]:
        def intersect(s: Point2, e: Point2) -> Point2:
            t = (bound - s[0]) / (e[0] - s[0])
            return (bound, s[1] + t * (e[1] - s[1]))
        return intersect

    def along_y(bound: float) -> Callable[[Point2, Point2], Point2]:
        def intersect(s: Point2, e: Point2) -> Point2:
            t = (bound - s[1]) / (e[1] - s[1])
            return (s[0] + t * (e[0] - s[0]), bound)
        return intersect

    edges = (
        (lambda p: p[0] >= x_min, along_x(x_min)),
        (lambda p: p[0] <= x_max, along_x(x_max)),
        (lambda p: p[1] >= y_min, along_y(y_min)),
        (lambda p: p[1] <= y_max, along_y(y_max)),
    )
    for inside, intersect in edges:
        if not output:
            break
        candidates = output
        output = []
        start = candidates[-1]
        for end in candidates:
            if inside(end):
                if not inside(start):
                    output.append(intersect(start, end))
                output.append(end)
            elif inside(start):
                output.append(intersect(start, end))
            start = end

    deduped: List[Point2] = []
    for point in output:
        if not deduped or (abs(point[0] - deduped[-1][0]) > 1e-12 or abs(point[1] - deduped[-1][1]) > 1e-12):
            deduped.append(point)
    if len(deduped) > 1 and abs(deduped[0][0] - deduped[-1][0]) <= 1e-12 and abs(deduped[0][1] - deduped[-1][1]) <= 1e-12:
        deduped.pop()
    if len(deduped) < 3:
        return Polygon2D()
    clipped = Polygon2D(vertices=tuple(deduped))
    if polygon_area(clipped) <= 0.0:
        return Polygon2D()
    return clipped


def polygon_mask(polygon: Polygon2D, height: int, width: int) -> np.ndarray:
    """Pixels whose centres lie inside (or on) a convex CCW polygon."""
    mask = np.zeros((height, width), dtype=bool)
    if polygon.is_empty:
        return mask
    pts = polygon.as_array()
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    mask[:] = True
    for index in range(len(pts)):
        ax, ay = pts[index]
        bx, by = pts[(index + 1) % len(pts)]
        mask &= (bx - ax) * (vv - ay) - (by - ay) * (uu - ax) >= -1e-12
    return mask


def visible_box_polygons(
    boxes: Sequence[Box3D],
    ego_pose: Pose,
    ego_to_camera: np.ndarray,
    intrinsics: CameraIntrinsics,
    z_near: float = Z_NEAR,
) -> List[Tuple[Polygon2D, float, float]]:
    """(clipped hull, clipped area, centre depth) for every box with a visible hull."""
    rect = (0.0, 0.0, float(intrinsics.width), float(intrinsics.height))
    polygons: List[Tuple[Polygon2D, float, float]] = []
    for box in boxes:
        hull = project_box_hull(box, ego_pose, ego_to_camera, intrinsics, z_near)
        if hull is None or hull.is_empty:
            continue
        clipped = clip_polygon(hull, rect)
        if clipped.is_empty:
            continue
        depth = float(world_to_camera(np.asarray([box.center]), ego_pose, ego_to_camera)[0, 2])
        polygons.append((clipped, polygon_area(clipped), depth))
    return polygons


def weight_map(
    polygons: Sequence[Tuple[Polygon2D, float]],
    height: int,
    width: int,
    k: float = DEFAULT_K,
    c: float = DEFAULT_C,
) -> WeightMap:
    """Foreground pixels get k / p^c, background 1 / (H*W)^c, renormalized to sum H*W.

    A pixel covered by several polygons takes the smallest area.
    """
    if height <= 0 or width <= 0:
        raise GeometryError(f"weight map size must be positive, got {height}x{width}")
    owner_area = np.full((height, width), np.inf)
    for polygon, area in polygons:
        clamped = max(float(area), MIN_HULL_AREA)
        mask = polygon_mask(polygon, height, width)
        owner_area = np.where(mask & (clamped < owner_area), clamped, owner_area)
    foreground = np.isfinite(owner_area)
    background = 1.0 / float(height * width) ** c
    raw = np.where(foreground, k / np.power(np.where(foreground, owner_area, 1.0), c), background)
    values = float(height * width) * raw / raw.sum()
    return WeightMap(values=values.astype(np.float32))


# rasterization


def _clip_line_to_rect(
    p0: Point2, p1: Point2, rect: Tuple[float, float, float, float]
) -> Optional[Tuple[Point2, Point2]]:
    """Liang-Barsky line clipping."""
    x_min, y_min, x_max, y_max = rect
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, p0[0] - x_min), (dx, x_max - p0[0]), (-dy, p0[1] - y_min), (dy, y_max - p0[1])):
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        t = q / p
        if p < 0.0:
            if t > t1:
                return None
            t0 = max(t0, t)
        else:
            if t < t0:
                return None
            t1 = min(t1, t)
    return (p0[0] + t0 * dx, p0[1] + t0 * dy), (p0[0] + t1 * dx, p0[1] + t1 * dy)


def _pixel_index(coordinate: float, size: int) -> int:
    return min(max(int(math.floor(coordinate)), 0), size - 1)


def draw_segment(canvas: np.ndarray, p0: Point2, p1: Point2, value: float = 1.0) -> None:
    """1-pixel Bresenham stroke between two pixel-space points, clipped to the canvas."""
    height, width = canvas.shape
    clipped = _clip_line_to_rect(p0, p1, (0.0, 0.0, float(width), float(height)))
    if clipped is None:
        return
    (u0, v0), (u1, v1) = clipped
    col0, row0 = _pixel_index(u0, width), _pixel_index(v0, height)
    col1, row1 = _pixel_index(u1, width), _pixel_index(v1, height)
    d_col, d_row = abs(col1 - col0), -abs(row1 - row0)
    step_col = 1 if col0 < col1 else -1
    step_row = 1 if row0 < row1 else -1
    error = d_col + d_row
    while True:
        canvas[row0, col0] = value
        if col0 == col1 and row0 == row1:
            break
        doubled = 2 * error
        if doubled >= d_row:
            error += d_row
            col0 += step_col
        if doubled <= d_col:
            error += d_col
            row0 += step_row


def draw_polyline(
    canvas: np.ndarray,
    polyline: Polyline,
    ego_pose: Pose,
    ego_to_camera: np.ndarray,
    intrinsics: CameraIntrinsics,
    z_near: float = Z_NEAR,
    value: float = 1.0,
) -> None:
    camera = world_to_camera(np.asarray(polyline.points), ego_pose, ego_to_camera)
    for index in range(len(camera) - 1):
        segment = _clip_segment_near(camera[index].copy(), camera[index + 1].copy(), z_near)
        if segment is None:
            continue
        pixels, _ = pinhole(np.stack(segment), intrinsics, z_near=z_near * 0.5)
        draw_segment(canvas, tuple(pixels[0]), tuple(pixels[1]), value)


def rasterize_conditions(
    hdmap: Sequence[Polyline],
    boxes: Sequence[Box3D],
    ego_pose: Pose,
    ego_to_camera: np.ndarray,
    intrinsics: CameraIntrinsics,
    height: int,
    width: int,
    z_near: float = Z_NEAR,
) -> np.ndarray:
    """Binary [3, H, W] raster: lane strokes, crossing strokes, filled box hulls."""
    if (intrinsics.height, intrinsics.width) != (height, width):
        raise GeometryError(
            f"intrinsics are for {intrinsics.width}x{intrinsics.height}, raster is {width}x{height}"
        )
    raster = np.zeros((3, height, width), dtype=np.float32)
    for polyline in hdmap:
        channel = 0 if polyline.kind is PolylineKind.LANE_BOUNDARY else 1
        draw_polyline(raster[channel], polyline, ego_pose, ego_to_camera, intrinsics, z_near)
    for polygon, _, _ in visible_box_polygons(boxes, ego_pose, ego_to_camera, intrinsics, z_near):
        raster[2][polygon_mask(polygon, height, width)] = 1.0
    return raster


# annotation exchange


def annotations_to_dict(
    poses: Sequence[Pose],
    boxes: Sequence[Sequence[Box3D]],
    polylines: Sequence[Sequence[Polyline]],
    rig: CameraRig,
) -> Dict[str, object]:
    if not (len(poses) == len(boxes) == len(polylines)):
        raise GeometryError("poses, boxes and polylines must have one entry per frame")
    frames = [
        {
            "ego_pose": pose.to_dict(),
            "boxes": [box.to_dict() for box in frame_boxes],
            "polylines": [line.to_dict() for line in frame_lines],
        }
        for pose, frame_boxes, frame_lines in zip(poses, boxes, polylines)
    ]
    payload = rig.to_dict()
    return {"frames": frames, "intrinsics": payload["intrinsics"], "T_ego2cam": payload["T_ego2cam"]}


def annotations_from_dict(
    payload: Dict[str, object],
) -> Tuple[List[Pose], List[List[Box3D]], List[List[Polyline]], CameraRig]:
    rig = CameraRig.from_dict({"intrinsics": payload["intrinsics"], "T_ego2cam": payload["T_ego2cam"]})
    poses = [Pose.from_dict(frame["ego_pose"]) for frame in payload["frames"]]
    boxes = [[Box3D.from_dict(box) for box in frame["boxes"]] for frame in payload["frames"]]
    lines = [[Polyline.from_dict(line) for line in frame["polylines"]] for frame in payload["frames"]]
    return poses, boxes, lines, rig


def load_annotations(path: Path | str) -> Tuple[List[Pose], List[List[Box3D]], List[List[Polyline]], CameraRig]:
    with open(path, "r", encoding="utf-8") as handle:
        return annotations_from_dict(json.load(handle))
