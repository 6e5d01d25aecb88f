"""Camera projection, box algebra and BEV grid coordinates.

Conventions used throughout the package:

* Ego frame: +x forward, +y left, +z up (meters). Ground plane is z = 0.
* Camera frame: +x right, +y down, +z along the optical axis.
* BEV grid: ego +x runs along grid columns, ego +y along grid rows.
  Continuous grid coordinate ``gx = (x - x_min) / cell_x`` so that cell
  ``(row, col)`` covers ``[col, col + 1) x [row, row + 1)`` and its sample
  sits at the cell center ``(col + 0.5, row + 0.5)``.
* Pixel coordinates follow the same half-open convention: pixel ``(v, u)``
  covers ``[u, u + 1) x [v, v + 1)``.
* Yaw is the heading of the box length axis, counter-clockwise from +x,
  normalized to ``(-pi, pi]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Tuple

import numpy as np

DEPTH_EPS = 1e-6


def wrap_angle(a: float) -> float:
    """Map an angle to ``(-pi, pi]``."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


def wrap_angle_array(a: np.ndarray) -> np.ndarray:
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # camera-to-ego, 3x3
    translation: np.ndarray  # camera center in ego frame
    image_width: int
    image_height: int

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def intrinsic(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def ego_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Transform ``(..., 3)`` ego points into the camera frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy, self.image_width, self.image_height)
            == (other.fx, other.fy, other.cx, other.cy, other.image_width, other.image_height)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None


def look_rotation(heading: float, pitch: float = 0.0) -> np.ndarray:
    """Camera-to-ego rotation for a camera looking along ``heading`` (yaw in ego xy),
    tilted down by ``pitch`` radians."""
    ch, sh = math.cos(heading), math.sin(heading)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([ch * cp, sh * cp, -sp])
    right = np.array([sh, -ch, 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


@dataclass(frozen=True)
class BEVSpec:
    x_min: float = -25.6
    x_max: float = 25.6
    y_min: float = -25.6
    y_max: float = 25.6
    grid_h: int = 64
    grid_w: int = 64

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("BEV extent must have positive size")
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid must have at least one cell")

    @property
    def cell_x(self) -> float:
        return (self.x_max - self.x_min) / self.grid_w

    @property
    def cell_y(self) -> float:
        return (self.y_max - self.y_min) / self.grid_h

    def to_grid(self, x, y):
        return (np.asarray(x) - self.x_min) / self.cell_x, (np.asarray(y) - self.y_min) / self.cell_y

    def to_metric(self, gx, gy):
        return np.asarray(gx) * self.cell_x + self.x_min, np.asarray(gy) * self.cell_y + self.y_min

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max


@dataclass(frozen=True)
class Box3D:
    center: Tuple[float, float, float]
    l: float
    w: float
    h: float
    yaw: float
    class_id: int
    instance_id: int

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dims must be positive, got {(self.l, self.w, self.h)}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))


@dataclass(frozen=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float
    view_index: int
    instance_id: int

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)


class RotBox(NamedTuple):
    """Rotated rectangle in continuous BEV grid coordinates."""

    cx: float
    cy: float
    len_x: float  # along the box length axis, in grid cells
    len_y: float  # along the box width axis, in grid cells
    yaw: float


@dataclass(frozen=True)
class BEVSimilarity:
    """``p' = F * s * R(theta) * p`` acting on ego coordinates about the origin.

    ``flip_x`` negates ego x, ``flip_y`` negates ego y. Scale applies to all
    three axes so box heights stay consistent with ground placement.
    """

    theta: float = 0.0
    scale: float = 1.0
    flip_x: bool = False
    flip_y: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def flips(self) -> np.ndarray:
        return np.diag([-1.0 if self.flip_x else 1.0, -1.0 if self.flip_y else 1.0])

    @property
    def matrix(self) -> np.ndarray:
        """2x2 linear map on ego (x, y)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.flips @ (self.scale * np.array([[c, -s], [s, c]]))

    @property
    def matrix3(self) -> np.ndarray:
        """3x3 linear map on ego (x, y, z)."""
        m = np.eye(3) * self.scale
        m[:2, :2] = self.matrix
        return m

    def inverse(self) -> "BEVSimilarity":
        # (F s R)^-1 = F (1/s) R(-theta * det F)
        det_f = (-1.0 if self.flip_x else 1.0) * (-1.0 if self.flip_y else 1.0)
        return BEVSimilarity(-self.theta * det_f, 1.0 / self.scale, self.flip_x, self.flip_y)

    def transform_yaw(self, yaw: float) -> float:
        yaw = yaw + self.theta
        if self.flip_x:
            yaw = math.pi - yaw
        if self.flip_y:
            yaw = -yaw
        return wrap_angle(yaw)

    @property
    def is_identity(self) -> bool:
        return self.theta == 0.0 and self.scale == 1.0 and not self.flip_x and not self.flip_y


IDENTITY_SIMILARITY = BEVSimilarity()


def project_point(camera: CameraModel, point) -> Optional[Tuple[float, float, float]]:
    """Pinhole projection of an ego-frame point; ``None`` if not in front of the camera."""
    x, y, z = camera.ego_to_camera(np.asarray(point, dtype=np.float64))
    if z <= DEPTH_EPS:
        return None
    return camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy, float(z)


def project_points(camera: CameraModel, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(uv, depth)``; ``uv`` is NaN where depth <= eps."""
    pc = camera.ego_to_camera(points)
    depth = pc[..., 2]
    valid = depth > DEPTH_EPS
    safe = np.where(valid, depth, 1.0)
    uv = np.stack([camera.fx * pc[..., 0] / safe + camera.cx, camera.fy * pc[..., 1] / safe + camera.cy], -1)
    uv[~valid] = np.nan
    return uv, depth


_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=np.float64
)


def box3d_corners(box: Box3D) -> np.ndarray:
    """The 8 cuboid corners as an ``(8, 3)`` array."""
    half = np.array([box.l, box.w, box.h]) / 2.0
    return (_CORNER_SIGNS * half) @ rot_z(box.yaw).T + np.asarray(box.center)


def box3d_to_box2d(camera: CameraModel, box: Box3D, view_index: int = 0) -> Optional[Box2D]:
    """Axis-aligned envelope of the projected visible corners, clipped to the image."""
    uv, depth = project_points(camera, box3d_corners(box))
    visible = depth > DEPTH_EPS
    if visible.sum() < 2:
        return None
    uv = uv[visible]
    x1 = float(np.clip(uv[:, 0].min(), 0, camera.image_width))
    x2 = float(np.clip(uv[:, 0].max(), 0, camera.image_width))
    y1 = float(np.clip(uv[:, 1].min(), 0, camera.image_height))
    y2 = float(np.clip(uv[:, 1].max(), 0, camera.image_height))
    if (x2 - x1) * (y2 - y1) < 4.0 or x2 <= x1 or y2 <= y1:
        return None
    return Box2D(x1, y1, x2, y2, view_index, box.instance_id)


def box3d_to_bev_rot_box(box: Box3D, spec: BEVSpec) -> RotBox:
    gx, gy = spec.to_grid(box.center[0], box.center[1])
    return RotBox(float(gx), float(gy), box.l / spec.cell_x, box.w / spec.cell_y, box.yaw)


def bev_rot_box_to_metric(rbox: RotBox, spec: BEVSpec) -> Tuple[float, float, float, float, float]:
    """Inverse of :func:`box3d_to_bev_rot_box`: ``(x, y, l, w, yaw)`` in meters."""
    x, y = spec.to_metric(rbox.cx, rbox.cy)
    return float(x), float(y), rbox.len_x * spec.cell_x, rbox.len_y * spec.cell_y, rbox.yaw


def apply_bev_similarity(t: BEVSimilarity, box: Box3D) -> Box3D:
    center = t.matrix3 @ np.asarray(box.center)
    return replace(
        box,
        center=tuple(center),
        l=box.l * t.scale,
        w=box.w * t.scale,
        h=box.h * t.scale,
        yaw=t.transform_yaw(box.yaw),
    )


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated BEV IoU via polygon clipping (Sutherland-Hodgman)."""
    pa = box3d_corners(a)[::2, :2][[0, 1, 3, 2]]
    pb = box3d_corners(b)[::2, :2][[0, 1, 3, 2]]
    inter = _polygon_area(_clip_polygon(pa, pb))
    union = a.l * a.w + b.l * b.w - inter
    return float(inter / union) if union > 0 else 0.0


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    # clip must be convex; orientation normalized to counter-clockwise
    if _signed_area(clip) < 0:
        clip = clip[::-1]
    out = list(subject)
    for i in range(len(clip)):
        a, b = clip[i], clip[(i + 1) % len(clip)]
        inp, out = out, []
        if not inp:
            break
        for j in range(len(inp)):
            p, q = inp[j], inp[(j + 1) % len(inp)]
            p_in = _cross(b - a, p - a) >= 0
            q_in = _cross(b - a, q - a) >= 0
            if p_in:
                out.append(p)
            if p_in != q_in:
                d = q - p
                denom = _cross(b - a, d)
                s = -_cross(b - a, p - a) / denom if denom != 0 else 0.0
                out.append(p + s * d)
    return np.array(out).reshape(-1, 2)


def _cross(u, v) -> float:
    return float(u[0] * v[1] - u[1] * v[0])


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
