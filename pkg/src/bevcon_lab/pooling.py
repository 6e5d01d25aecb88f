"""Instance feature pooling from BEV grids and perspective feature maps."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import BEVSpec, Box2D, Box3D, RotBox, box3d_to_bev_rot_box
from .instrument import COUNTERS

MIN_BEV_CELLS = 0.25
MIN_IMAGE_PX = 1.0


@dataclass(frozen=True)
class PoolConfig:
    output_size: int = 3
    sampling_ratio: int = 2
    gamma: float = 0.6
    pool_mode: str = "align"  # "align" | "gather"

    def __post_init__(self):
        if self.output_size < 1 or self.sampling_ratio < 1:
            raise ValueError("output_size and sampling_ratio must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.pool_mode not in ("align", "gather"):
            raise ValueError(f"unknown pool_mode {self.pool_mode!r}")


@dataclass
class InstanceFeatures:
    ids: List[int]
    vectors: torch.Tensor  # (n, d), rows unit norm
    source: str = ""
    views: Optional[List[int]] = None

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def empty(cls, d: int, source: str = "", dtype=torch.float32) -> "InstanceFeatures":
        return cls([], torch.zeros(0, d, dtype=dtype), source, [])


class ProjectionHead(nn.Module):
    """Two-layer MLP applied to pooled vectors before normalization."""

    def __init__(self, d_in: int, d_out: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_in, d_in), nn.ReLU(inplace=True), nn.Linear(d_in, d_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def bilinear_sample(fmap: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Sample ``fmap`` (C, H, W) at continuous points; zero outside the map.

    Cell ``(r, c)`` holds the value at ``(c + 0.5, r + 0.5)``. Returns ``(*xs.shape, C)``.
    """
    c, h, w = fmap.shape
    x = xs - 0.5
    y = ys - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx1 = x - x0
    wy1 = y - y0
    flat = fmap.reshape(c, h * w).t()
    out = torch.zeros(*xs.shape, c, dtype=fmap.dtype, device=fmap.device)
    for dx, wx in ((0, 1.0 - wx1), (1, wx1)):
        for dy, wy in ((0, 1.0 - wy1), (1, wy1)):
            xi = (x0 + dx).long()
            yi = (y0 + dy).long()
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = torch.where(ok, yi * w + xi, torch.zeros_like(xi))
            weight = (wx * wy * ok).to(fmap.dtype)
            out = out + flat[idx.reshape(-1)].reshape(*xs.shape, c) * weight.unsqueeze(-1)
    return out


def _sample_offsets(n_bins: int, ratio: int, dtype) -> torch.Tensor:
    """Sample positions in [-0.5, 0.5] along one axis: bins split evenly, ``ratio`` samples each."""
    k = torch.arange(n_bins * ratio, dtype=dtype)
    return (k + 0.5) / (n_bins * ratio) - 0.5


def rotated_sample_points(rboxes: torch.Tensor, cfg: PoolConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    """Sample points for ``(n, 5)`` rotated boxes ``(cx, cy, len_x, len_y, yaw)``: ``(n, S*r, S*r)`` each."""
    dtype = rboxes.dtype
    off = _sample_offsets(cfg.output_size, cfg.sampling_ratio, dtype).to(rboxes.device)
    cx, cy, lx, ly, yaw = rboxes.unbind(-1)
    u = off.view(1, 1, -1) * lx.view(-1, 1, 1)  # along length axis
    v = off.view(1, -1, 1) * ly.view(-1, 1, 1)  # along width axis
    c, s = torch.cos(yaw).view(-1, 1, 1), torch.sin(yaw).view(-1, 1, 1)
    xs = cx.view(-1, 1, 1) + c * u - s * v
    ys = cy.view(-1, 1, 1) + s * u + c * v
    return xs, ys


def roi_align_rotated(fmap: torch.Tensor, rboxes: torch.Tensor, cfg: PoolConfig) -> torch.Tensor:
    """Rotated RoI align, bins mean-pooled: ``(C, H, W), (n, 5) -> (n, C)``."""
    if rboxes.numel() == 0:
        return fmap.new_zeros(0, fmap.shape[0])
    xs, ys = rotated_sample_points(rboxes.to(fmap.dtype), cfg)
    # every bin has the same sample count, so the mean of bin means is the mean of all samples
    return bilinear_sample(fmap, xs, ys).mean(dim=(1, 2))


def roi_align_bev(fmap: torch.Tensor, rbox: RotBox, cfg: PoolConfig = PoolConfig()) -> torch.Tensor:
    """Pool one rotated grid box from a ``(C, H, W)`` BEV map into a C-vector (not normalized)."""
    if rbox.len_x <= 0 or rbox.len_y <= 0:
        raise ValueError("box lengths must be positive")
    t = torch.tensor([list(rbox)], dtype=fmap.dtype, device=fmap.device)
    return roi_align_rotated(fmap, t, cfg)[0]


def roi_align_image(fmap: torch.Tensor, box: Sequence[float], cfg: PoolConfig = PoolConfig()) -> torch.Tensor:
    """Axis-aligned RoI align of ``(x1, y1, x2, y2)`` in feature-map coordinates."""
    x1, y1, x2, y2 = (float(v) for v in box)
    rbox = RotBox((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, 0.0)
    return roi_align_bev(fmap, rbox, cfg)


def gather_cells(fmap: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Naive pooling: the feature of the cell containing each ``(x, y)`` center."""
    c, h, w = fmap.shape
    xi = torch.floor(centers[:, 0]).long().clamp(0, w - 1)
    yi = torch.floor(centers[:, 1]).long().clamp(0, h - 1)
    return fmap[:, yi, xi].t()


def shrink_box2d(box: Box2D, gamma: float) -> Tuple[Box2D, bool]:
    """Scale a box about its center by ``gamma``. Returns ``(box, ok)``; ``ok`` is False
    when a side falls below one pixel."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    if gamma == 1.0:
        return box, box.width >= MIN_IMAGE_PX and box.height >= MIN_IMAGE_PX
    cx, cy = (box.x1 + box.x2) / 2.0, (box.y1 + box.y2) / 2.0
    hw, hh = box.width * gamma / 2.0, box.height * gamma / 2.0
    out = replace(box, x1=cx - hw, y1=cy - hh, x2=cx + hw, y2=cy + hh)
    return out, out.width >= MIN_IMAGE_PX and out.height >= MIN_IMAGE_PX


def _normalize(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1, eps=1e-12)


def _outside_grid(rb: RotBox, h: int, w: int, cfg: PoolConfig) -> bool:
    """True when no sample point of the box lands on the grid."""
    xs, ys = rotated_sample_points(torch.tensor([list(rb)], dtype=torch.float64), cfg)
    inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    return not bool(inside.any())


def pool_instances_bev(
    grid: torch.Tensor,
    boxes: Sequence[Box3D],
    spec: BEVSpec,
    cfg: PoolConfig = PoolConfig(),
    head: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    source: str = "bev",
) -> InstanceFeatures:
    """Pool, project and L2-normalize one feature per box from a ``(C, H, W)`` BEV grid."""
    COUNTERS["pool_contrast"] += 1
    c, h, w = grid.shape
    kept, rows = [], []
    for box in boxes:
        rb = box3d_to_bev_rot_box(box, spec)
        if rb.len_x < MIN_BEV_CELLS or rb.len_y < MIN_BEV_CELLS or _outside_grid(rb, h, w, cfg):
            continue
        kept.append(box.instance_id)
        rows.append(list(rb))
    if not kept:
        out_d = c if head is None else head(grid.new_zeros(1, c)).shape[-1]
        return InstanceFeatures.empty(out_d, source, grid.dtype)
    rboxes = torch.tensor(rows, dtype=grid.dtype, device=grid.device)
    if cfg.pool_mode == "gather":
        pooled = gather_cells(grid, rboxes[:, :2])
    else:
        pooled = roi_align_rotated(grid, rboxes, cfg)
    if head is not None:
        pooled = head(pooled)
    return InstanceFeatures(kept, _normalize(pooled), source)


def pool_instances_image(
    features: Sequence[torch.Tensor],
    strides: Sequence[int],
    boxes2d: Sequence[Box2D],
    gamma: float,
    cfg: PoolConfig = PoolConfig(),
    heads: Optional[Sequence[Callable[[torch.Tensor], torch.Tensor]]] = None,
) -> List[InstanceFeatures]:
    """One :class:`InstanceFeatures` per level from per-level ``(V, C_j, H_j, W_j)`` maps.

    Boxes are shrunk by ``gamma`` about their centers, mapped to each level by
    dividing by its stride, and RoI-aligned in their own view.
    """
    COUNTERS["pool_contrast"] += 1
    shrunk = []
    for b in boxes2d:
        sb, ok = shrink_box2d(b, gamma)
        if ok:
            shrunk.append(sb)
    out = []
    for j, (fmap, stride) in enumerate(zip(features, strides)):
        c = fmap.shape[1]
        head = None if heads is None else heads[j]
        if not shrunk:
            out_d = c if head is None else head(fmap.new_zeros(1, c)).shape[-1]
            empty = InstanceFeatures.empty(out_d, f"image_l{j}", fmap.dtype)
            out.append(empty)
            continue
        pooled = []
        for view in sorted({b.view_index for b in shrunk}):
            vb = [b for b in shrunk if b.view_index == view]
            rboxes = torch.tensor(
                [[(b.x1 + b.x2) / (2 * stride), (b.y1 + b.y2) / (2 * stride), b.width / stride, b.height / stride, 0.0] for b in vb],
                dtype=fmap.dtype,
                device=fmap.device,
            )
            pooled.append((vb, roi_align_rotated(fmap[view], rboxes, cfg)))
        ids = [b.instance_id for vb, _ in pooled for b in vb]
        views = [b.view_index for vb, _ in pooled for b in vb]
        vec = torch.cat([p for _, p in pooled], 0)
        if head is not None:
            vec = head(vec)
        out.append(InstanceFeatures(ids, _normalize(vec), f"image_l{j}", views))
    return out
