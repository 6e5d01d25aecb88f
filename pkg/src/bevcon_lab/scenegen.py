"""Procedural multi-camera driving scenes with 3D box annotations.

Objects are flat-shaded cuboids on a textured ground plane, one color per
class, rendered with a painter's algorithm into a ring of pinhole cameras.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import (
    BEVSpec,
    Box2D,
    Box3D,
    CameraModel,
    bev_iou,
    box3d_corners,
    box3d_to_box2d,
    look_rotation,
)
from .serialization import dumps_exact

DATASET_VERSION = 1
MAX_PLACEMENT_ATTEMPTS = 1000

# mean (l, w, h) per class and its display color
CLASS_DIMS = ((4.2, 1.8, 1.5), (4.4, 2.4, 2.9), (0.8, 0.8, 1.8), (1.8, 0.7, 1.5), (0.6, 0.6, 1.0))
CLASS_COLORS = ((0.85, 0.15, 0.1), (0.15, 0.3, 0.9), (0.95, 0.85, 0.1), (0.1, 0.8, 0.25), (0.8, 0.2, 0.8))


class PlacementError(RuntimeError):
    """Raised when non-overlapping object placement is infeasible."""


@dataclass(frozen=True)
class SceneGenConfig:
    n_views: int = 6
    image_height: int = 128
    image_width: int = 224
    bev: BEVSpec = field(default_factory=BEVSpec)
    n_min: int = 3
    n_max: int = 8
    n_classes: int = 4
    hfov_deg: float = 70.0
    camera_height: float = 1.6
    camera_offset: float = 0.5
    camera_pitch_deg: float = 4.0
    min_range: float = 6.0
    max_range: float = 23.0
    dim_jitter: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.bev, dict):
            object.__setattr__(self, "bev", BEVSpec(**self.bev))
        if self.n_min < 2:
            raise ValueError("n_min must be >= 2")
        if self.n_max < self.n_min:
            raise ValueError("n_max must be >= n_min")
        if self.n_views < 1:
            raise ValueError("need at least one view")
        if not 1 <= self.n_classes <= len(CLASS_DIMS):
            raise ValueError(f"n_classes must be in [1, {len(CLASS_DIMS)}]")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Scene:
    images: List[np.ndarray]  # per view, (H, W, 3) float32 in [0, 1]
    cameras: List[CameraModel]
    boxes: List[Box3D]
    scene_id: int = 0

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.boxes == other.boxes
            and self.cameras == other.cameras
            and len(self.images) == len(other.images)
            and all(a.dtype == b.dtype and np.array_equal(a, b) for a, b in zip(self.images, other.images))
        )

    def boxes2d(self) -> List[Box2D]:
        out = []
        for k, cam in enumerate(self.cameras):
            for box in self.boxes:
                b2 = box3d_to_box2d(cam, box, view_index=k)
                if b2 is not None:
                    out.append(b2)
        return out


def make_cameras(config: SceneGenConfig) -> List[CameraModel]:
    f = (config.image_width / 2.0) / math.tan(math.radians(config.hfov_deg) / 2.0)
    cams = []
    for k in range(config.n_views):
        heading = 2.0 * math.pi * k / config.n_views
        t = (config.camera_offset * math.cos(heading), config.camera_offset * math.sin(heading), config.camera_height)
        cams.append(
            CameraModel(
                fx=f,
                fy=f,
                cx=config.image_width / 2.0,
                cy=config.image_height / 2.0,
                rotation=look_rotation(heading, math.radians(config.camera_pitch_deg)),
                translation=np.array(t),
                image_width=config.image_width,
                image_height=config.image_height,
            )
        )
    return cams


def _place_boxes(config: SceneGenConfig, rng: np.random.Generator) -> List[Box3D]:
    n = int(rng.integers(config.n_min, config.n_max + 1))
    boxes: List[Box3D] = []
    attempts = 0
    while len(boxes) < n:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise PlacementError(f"could not place {n} non-overlapping boxes in {MAX_PLACEMENT_ATTEMPTS} attempts")
        cls = int(rng.integers(0, config.n_classes))
        jitter = 1.0 + config.dim_jitter * rng.uniform(-1.0, 1.0, size=3)
        l, w, h = (np.array(CLASS_DIMS[cls]) * jitter).tolist()
        r = rng.uniform(config.min_range, config.max_range)
        phi = rng.uniform(-math.pi, math.pi)
        yaw = rng.uniform(-math.pi, math.pi)
        x, y = r * math.cos(phi), r * math.sin(phi)
        if not config.bev.contains(x, y):
            continue
        cand = Box3D((x, y, h / 2.0), l, w, h, yaw, cls, len(boxes))
        if all(bev_iou(cand, b) < 0.05 for b in boxes) and all(
            math.hypot(x - b.center[0], y - b.center[1]) > 1.0 for b in boxes
        ):
            boxes.append(cand)
    return boxes


# face -> corner indices (see geometry._CORNER_SIGNS ordering), outward normal in box frame
_FACES = (
    ((0, 1, 3, 2), (1.0, 0.0, 0.0)),
    ((4, 6, 7, 5), (-1.0, 0.0, 0.0)),
    ((0, 4, 5, 1), (0.0, 1.0, 0.0)),
    ((2, 3, 7, 6), (0.0, -1.0, 0.0)),
    ((0, 2, 6, 4), (0.0, 0.0, 1.0)),
    ((1, 5, 7, 3), (0.0, 0.0, -1.0)),
)
_LIGHT = np.array([0.4, 0.3, 0.866])
_HAZE = np.array([0.72, 0.74, 0.78])


def _pixel_rays(cam: CameraModel) -> np.ndarray:
    v, u = np.mgrid[0 : cam.image_height, 0 : cam.image_width] + 0.5
    pix = np.stack([u, v, np.ones_like(u)], -1)
    return pix @ np.linalg.inv(cam.intrinsic).T @ cam.rotation.T


def _render_background(cam: CameraModel) -> np.ndarray:
    rays = _pixel_rays(cam)
    dz = rays[..., 2]
    ground = dz < -1e-6
    t = np.where(ground, -cam.translation[2] / np.where(ground, dz, -1.0), 0.0)
    gx = cam.translation[0] + t * rays[..., 0]
    gy = cam.translation[1] + t * rays[..., 1]
    checker = (np.floor(gx / 2.0) + np.floor(gy / 2.0)) % 2
    lines = ((np.abs(gx - np.round(gx / 4.0) * 4.0) < 0.08) | (np.abs(gy - np.round(gy / 4.0) * 4.0) < 0.08))
    base = 0.38 + 0.07 * checker + 0.12 * lines
    dist = np.hypot(gx - cam.translation[0], gy - cam.translation[1])
    fog = np.clip(dist / 60.0, 0.0, 1.0)[..., None]
    ground_rgb = (1.0 - fog) * np.stack([base, base * 0.98, base * 0.92], -1) + fog * _HAZE
    elev = np.clip(rays[..., 2] / np.linalg.norm(rays, axis=-1), 0.0, 1.0)[..., None]
    sky_rgb = (1.0 - elev) * _HAZE + elev * np.array([0.35, 0.55, 0.9])
    return np.where(ground[..., None], ground_rgb, sky_rgb)


def _fill_convex(mask_shape, poly: np.ndarray) -> np.ndarray:
    """Boolean mask of pixels whose centers lie inside a convex polygon."""
    h, w = mask_shape
    x0 = max(int(math.floor(poly[:, 0].min())), 0)
    x1 = min(int(math.ceil(poly[:, 0].max())), w)
    y0 = max(int(math.floor(poly[:, 1].min())), 0)
    y1 = min(int(math.ceil(poly[:, 1].max())), h)
    mask = np.zeros(mask_shape, dtype=bool)
    if x1 <= x0 or y1 <= y0:
        return mask
    v, u = np.mgrid[y0:y1, x0:x1] + 0.5
    area2 = np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - poly[:, 1] * np.roll(poly[:, 0], -1))
    if abs(area2) < 1e-12:
        return mask
    sign = 1.0 if area2 > 0 else -1.0
    inside = np.ones(u.shape, dtype=bool)
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        cross = (b[0] - a[0]) * (v - a[1]) - (b[1] - a[1]) * (u - a[0])
        inside &= sign * cross >= 0
    mask[y0:y1, x0:x1] = inside
    return mask


def render_view(cam: CameraModel, boxes: Sequence[Box3D]) -> Tuple[np.ndarray, Dict[int, np.ndarray]]:
    """Render one view. Returns the float image and per-instance pixel footprints."""
    img = _render_background(cam)
    shape = (cam.image_height, cam.image_width)
    footprints: Dict[int, np.ndarray] = {}
    order = sorted(boxes, key=lambda b: -float(np.linalg.norm(np.asarray(b.center) - cam.translation)))
    for box in order:
        corners = box3d_corners(box)
        pc = cam.ego_to_camera(corners)
        # partial visibility is never rendered; keeps silhouettes inside the projected envelope
        if np.any(pc[:, 2] <= 1e-6):
            continue
        # objects too small to get a 2D annotation are not drawn either
        if box3d_to_box2d(cam, box) is None:
            continue
        uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], -1)
        dist = float(np.linalg.norm(np.asarray(box.center) - cam.translation))
        atten = math.exp(-dist / 80.0)
        color = np.asarray(CLASS_COLORS[box.class_id])
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        fp = np.zeros(shape, dtype=bool)
        for idx, normal in _FACES:
            n_ego = rot @ np.asarray(normal)
            face_center = corners[list(idx)].mean(axis=0)
            if np.dot(n_ego, face_center - cam.translation) >= 0:
                continue
            mask = _fill_convex(shape, uv[list(idx)])
            if not mask.any():
                continue
            shade = 0.55 + 0.45 * max(float(np.dot(n_ego, _LIGHT)), 0.0)
            rgb = atten * shade * color + (1.0 - atten) * _HAZE
            img[mask] = rgb
            fp |= mask
        if fp.any():
            footprints[box.instance_id] = fp
            for other in footprints:
                if other != box.instance_id:
                    footprints[other] &= ~fp
    return img, footprints


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def generate_scene(config: SceneGenConfig, scene_seed: int, scene_id: int = 0) -> Scene:
    """Deterministically build one scene from ``(config, scene_seed)``."""
    rng = np.random.default_rng(scene_seed)
    boxes = _place_boxes(config, rng)
    cams = make_cameras(config)
    images = [_quantize(render_view(cam, boxes)[0]) for cam in cams]
    return Scene(images=images, cameras=cams, boxes=boxes, scene_id=scene_id)


def scene_seed_for(config: SceneGenConfig, scene_id: int) -> int:
    return int(np.random.SeedSequence([config.seed, scene_id]).generate_state(1, dtype=np.uint32)[0])


# --- dataset I/O -------------------------------------------------------------


def _camera_record(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
        "image_width": cam.image_width,
        "image_height": cam.image_height,
    }


def _box_record(box: Box3D) -> dict:
    return {
        "center": list(box.center),
        "l": box.l,
        "w": box.w,
        "h": box.h,
        "yaw": box.yaw,
        "class_id": box.class_id,
        "instance_id": box.instance_id,
    }


def scene_dir(root, scene_id: int) -> Path:
    return Path(root) / f"scene_{scene_id:05d}"


def save_scene(scene: Scene, root) -> Path:
    d = scene_dir(root, scene.scene_id)
    d.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(scene.images):
        u8 = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(u8).save(d / f"view_{k}.png", optimize=False)
    record = {
        "scene_id": scene.scene_id,
        "cameras": [_camera_record(c) for c in scene.cameras],
        "boxes": [_box_record(b) for b in scene.boxes],
    }
    (d / "annotations.json").write_text(dumps_exact(record))
    return d


def load_scene(root, scene_id: int) -> Scene:
    d = scene_dir(root, scene_id)
    record = json.loads((d / "annotations.json").read_text())
    cams = [
        CameraModel(
            fx=c["fx"],
            fy=c["fy"],
            cx=c["cx"],
            cy=c["cy"],
            rotation=np.array(c["rotation"]),
            translation=np.array(c["translation"]),
            image_width=c["image_width"],
            image_height=c["image_height"],
        )
        for c in record["cameras"]
    ]
    boxes = [
        Box3D(tuple(b["center"]), b["l"], b["w"], b["h"], b["yaw"], b["class_id"], b["instance_id"])
        for b in record["boxes"]
    ]
    images = [
        (np.asarray(Image.open(d / f"view_{k}.png").convert("RGB")).astype(np.float32) / np.float32(255.0))
        for k in range(len(cams))
    ]
    return Scene(images=images, cameras=cams, boxes=boxes, scene_id=record["scene_id"])


def load_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def manifest_hash(root) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


def generate_dataset(config: SceneGenConfig, n_scenes: int, root) -> dict:
    """Write ``n_scenes`` scenes under ``root`` and return the manifest.

    Appends to an existing dataset when its config hash matches.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    mpath = root / "manifest.json"
    chash = config.config_hash()
    if mpath.exists():
        manifest = load_manifest(root)
        if manifest["config_hash"] != chash:
            raise ValueError(
                f"config hash mismatch: dataset has {manifest['config_hash']}, config gives {chash}"
            )
    else:
        manifest = {"version": DATASET_VERSION, "config_hash": chash, "config": config.to_dict(), "scenes": []}
    start = len(manifest["scenes"])
    for scene_id in range(start, start + n_scenes):
        seed = scene_seed_for(config, scene_id)
        save_scene(generate_scene(config, seed, scene_id), root)
        manifest["scenes"].append({"scene_id": scene_id, "seed": seed})
    tmp = mpath.with_suffix(".json.tmp")
    tmp.write_text(dumps_exact(manifest))
    os.replace(tmp, mpath)
    return manifest


def config_from_manifest(manifest: dict) -> SceneGenConfig:
    return SceneGenConfig(**manifest["config"])
