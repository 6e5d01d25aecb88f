"""Two-branch augmentation: per-view image affines + photometric jitter, and a
BEV similarity per branch, with annotations carried through both."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .geometry import (
    DEPTH_EPS,
    BEVSimilarity,
    BEVSpec,
    Box2D,
    Box3D,
    CameraModel,
    apply_bev_similarity,
    box3d_corners,
)
from .scenegen import Scene


@dataclass(frozen=True)
class AugConfig:
    resize: Tuple[float, float] = (0.8, 1.2)
    rotation_deg: float = 10.0
    flip_prob: float = 0.5
    crop_frac: float = 0.1
    photometric: float = 0.2
    bev_rotation_deg: float = 22.5
    bev_scale: Tuple[float, float] = (0.95, 1.05)
    bev_flip_prob: float = 0.5
    shared_bev_aug: bool = False

    def __post_init__(self):
        object.__setattr__(self, "resize", tuple(self.resize))
        object.__setattr__(self, "bev_scale", tuple(self.bev_scale))
        if min(self.resize) <= 0 or min(self.bev_scale) <= 0:
            raise ValueError("scale ranges must be positive")

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls(
            resize=(1.0, 1.0),
            rotation_deg=0.0,
            flip_prob=0.0,
            crop_frac=0.0,
            photometric=0.0,
            bev_rotation_deg=0.0,
            bev_scale=(1.0, 1.0),
            bev_flip_prob=0.0,
        )


@dataclass(frozen=True)
class ImageAugSpec:
    """Per-view image augmentation: ``p' = c + R S F (p - c) - crop`` then color jitter."""

    scale: float = 1.0
    rotation: float = 0.0  # radians
    flip: bool = False
    crop_dx: float = 0.0
    crop_dy: float = 0.0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("image scale must be positive")

    def matrix(self, width: int, height: int) -> np.ndarray:
        """3x3 homogeneous map from original to augmented pixel coordinates."""
        cx, cy = width / 2.0, height / 2.0
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        lin = self.scale * np.array([[c, -s], [s, c]]) @ np.diag([-1.0 if self.flip else 1.0, 1.0])
        m = np.eye(3)
        m[:2, :2] = lin
        m[:2, 2] = np.array([cx, cy]) - lin @ np.array([cx, cy]) - np.array([self.crop_dx, self.crop_dy])
        return m

    @property
    def is_geometric_identity(self) -> bool:
        return self.scale == 1.0 and self.rotation == 0.0 and not self.flip and self.crop_dx == 0.0 and self.crop_dy == 0.0


@dataclass
class AugmentedView:
    images: List[np.ndarray]
    cameras: List[CameraModel]
    image_aug: List[ImageAugSpec]
    bev_aug: BEVSimilarity
    boxes3d: List[Box3D]
    boxes2d: List[Box2D]

    def image_affines(self) -> List[np.ndarray]:
        return [a.matrix(c.image_width, c.image_height) for a, c in zip(self.image_aug, self.cameras)]


@dataclass
class AugmentedPair:
    view_a: AugmentedView
    view_b: AugmentedView
    shared_instance_ids: List[int]
    scene_id: int = 0


def warp_image(img: np.ndarray, affine: np.ndarray) -> np.ndarray:
    """Bilinear warp with zero fill; ``affine`` maps source to destination pixels."""
    inv = np.linalg.inv(affine)
    # continuous coords put pixel centers at index + 0.5; ndimage works in (row, col) index space
    lin = inv[:2, :2][::-1, ::-1]
    off = inv[:2, 2][::-1] + 0.5 * lin.sum(axis=1) - 0.5
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.affine_transform(img[..., ch], lin, offset=off, order=1, mode="constant", cval=0.0)
    return out


def photometric(img: np.ndarray, spec: ImageAugSpec) -> np.ndarray:
    out = img * spec.brightness
    mean = out.mean()
    out = (out - mean) * spec.contrast + mean
    gray = out.mean(axis=-1, keepdims=True)
    out = gray + (out - gray) * spec.saturation
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def augment_image(img: np.ndarray, spec: ImageAugSpec) -> np.ndarray:
    h, w = img.shape[:2]
    if not spec.is_geometric_identity:
        img = warp_image(img, spec.matrix(w, h))
    if (spec.brightness, spec.contrast, spec.saturation) != (1.0, 1.0, 1.0):
        img = photometric(img, spec)
    return img


def box3d_to_box2d_affine(
    camera: CameraModel, box: Box3D, affine: np.ndarray, view_index: int
) -> Optional[Box2D]:
    """Box2D of ``box`` in an affinely augmented image of ``camera``."""
    pc = camera.ego_to_camera(box3d_corners(box))
    visible = pc[:, 2] > DEPTH_EPS
    if visible.sum() < 2:
        return None
    pc = pc[visible]
    uv = np.stack([camera.fx * pc[:, 0] / pc[:, 2] + camera.cx, camera.fy * pc[:, 1] / pc[:, 2] + camera.cy], -1)
    uv = uv @ affine[:2, :2].T + affine[:2, 2]
    x1, x2 = np.clip([uv[:, 0].min(), uv[:, 0].max()], 0, camera.image_width)
    y1, y2 = np.clip([uv[:, 1].min(), uv[:, 1].max()], 0, camera.image_height)
    if x2 <= x1 or y2 <= y1 or (x2 - x1) * (y2 - y1) < 4.0:
        return None
    return Box2D(float(x1), float(y1), float(x2), float(y2), view_index, box.instance_id)


def sample_image_aug(rng: np.random.Generator, cfg: AugConfig, width: int, height: int) -> ImageAugSpec:
    j = cfg.photometric
    return ImageAugSpec(
        scale=float(rng.uniform(*cfg.resize)),
        rotation=math.radians(float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))),
        flip=bool(rng.random() < cfg.flip_prob),
        crop_dx=float(rng.uniform(-cfg.crop_frac, cfg.crop_frac) * width),
        crop_dy=float(rng.uniform(-cfg.crop_frac, cfg.crop_frac) * height),
        brightness=float(rng.uniform(1.0 - j, 1.0 + j)),
        contrast=float(rng.uniform(1.0 - j, 1.0 + j)),
        saturation=float(rng.uniform(1.0 - j, 1.0 + j)),
    )


def sample_bev_aug(rng: np.random.Generator, cfg: AugConfig) -> BEVSimilarity:
    return BEVSimilarity(
        theta=math.radians(float(rng.uniform(-cfg.bev_rotation_deg, cfg.bev_rotation_deg))),
        scale=float(rng.uniform(*cfg.bev_scale)),
        flip_x=bool(rng.random() < cfg.bev_flip_prob),
        flip_y=bool(rng.random() < cfg.bev_flip_prob),
    )


def build_view(
    scene: Scene, image_aug: Sequence[ImageAugSpec], bev_aug: BEVSimilarity, bev: BEVSpec, with_images: bool = True
) -> AugmentedView:
    images = [augment_image(img, spec) for img, spec in zip(scene.images, image_aug)] if with_images else []
    boxes3d = []
    for box in scene.boxes:
        moved = apply_bev_similarity(bev_aug, box)
        if bev.contains(moved.center[0], moved.center[1]):
            boxes3d.append(moved)
    boxes2d = []
    for k, (cam, spec) in enumerate(zip(scene.cameras, image_aug)):
        affine = spec.matrix(cam.image_width, cam.image_height)
        for box in scene.boxes:
            b2 = box3d_to_box2d_affine(cam, box, affine, k)
            if b2 is not None:
                boxes2d.append(b2)
    return AugmentedView(images, list(scene.cameras), list(image_aug), bev_aug, boxes3d, boxes2d)


def augment_pair(
    scene: Scene, seed, aug_config: AugConfig = AugConfig(), bev: BEVSpec = BEVSpec(), images_b: bool = True
) -> AugmentedPair:
    """Draw two independent augmentations of ``scene``.

    Image augmentations are drawn per view; the BEV similarity is drawn per
    branch unless ``aug_config.shared_bev_aug`` is set. ``images_b=False``
    skips warping branch b's images; the random draws are unchanged.
    """
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(2):
        img_augs = [sample_image_aug(rng, aug_config, c.image_width, c.image_height) for c in scene.cameras]
        draws.append((img_augs, sample_bev_aug(rng, aug_config)))
    if aug_config.shared_bev_aug:
        draws[1] = (draws[1][0], draws[0][1])
    view_a = build_view(scene, *draws[0], bev)
    view_b = build_view(scene, *draws[1], bev, with_images=images_b)
    ids_b = {b.instance_id for b in view_b.boxes3d}
    shared = [b.instance_id for b in view_a.boxes3d if b.instance_id in ids_b]
    return AugmentedPair(view_a, view_b, shared, scene.scene_id)


def unaugmented_view(scene: Scene) -> AugmentedView:
    """The identity branch, used at evaluation time."""
    ident = [ImageAugSpec()] * len(scene.cameras)
    return AugmentedView(list(scene.images), list(scene.cameras), ident, BEVSimilarity(), list(scene.boxes), scene.boxes2d())
