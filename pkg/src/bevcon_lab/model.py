"""Image backbone, EMA twin, depth-lift view transform, BEV refinement and head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import BEVSimilarity, BEVSpec, CameraModel
from .instrument import COUNTERS

REG_CHANNELS = 7  # dx, dy, z, log l, log w, sin yaw, cos yaw


@dataclass(frozen=True)
class ModelConfig:
    stem_channels: int = 16
    level_channels: Tuple[int, ...] = (32, 64, 96)
    depth_bins: int = 32
    depth_min: float = 1.0
    depth_max: float = 40.0
    bev_channels: int = 64
    n_layers: int = 3
    head_channels: int = 32
    n_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "level_channels", tuple(self.level_channels))

    @property
    def strides(self) -> Tuple[int, ...]:
        return tuple(4 * 2**j for j in range(len(self.level_channels)))

    @property
    def depth_values(self) -> np.ndarray:
        return np.linspace(self.depth_min, self.depth_max, self.depth_bins)


@dataclass
class FeaturePyramid:
    """``features[j]`` has shape ``(frames, views, C_j, H_j, W_j)``."""

    features: List[torch.Tensor]
    strides: Tuple[int, ...]

    @property
    def n_levels(self) -> int:
        return len(self.features)

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid([f.detach() for f in self.features], self.strides)


@dataclass
class BEVFeature:
    grid: torch.Tensor  # (frames, C, grid_h, grid_w)
    spec: BEVSpec
    layer_index: int = 0


@dataclass
class DetectionOutput:
    class_logits: torch.Tensor  # (frames, n_classes, grid_h, grid_w)
    box_reg: torch.Tensor  # (frames, 7, grid_h, grid_w)


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Four conv stages; pyramid outputs at strides 4, 8, 16."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.level_channels
        self.stem = _conv(3, cfg.stem_channels, 2)
        stages = [nn.Sequential(_conv(cfg.stem_channels, c[0], 2), _conv(c[0], c[0]))]
        for j in range(1, len(c)):
            stages.append(_conv(c[j - 1], c[j], 2))
        self.stages = nn.ModuleList(stages)
        self.strides = cfg.strides
        self.register_buffer("mean", torch.tensor([0.5, 0.5, 0.5]).view(1, 3, 1, 1), persistent=False)

    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        """``images``: (N, 3, H, W) in [0, 1]. Returns per-level (N, C_j, H_j, W_j)."""
        x = self.stem((images - self.mean) * 4.0)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


def backbone_forward(
    backbone: nn.Module, images: torch.Tensor, params: Optional[Mapping[str, torch.Tensor]] = None
) -> FeaturePyramid:
    """Run the backbone on ``(frames, views, 3, H, W)`` images.

    ``params`` substitutes a parameter snapshot (e.g. an EMA target).
    """
    f, v = images.shape[:2]
    if images.shape[2] != 3:
        raise ValueError(f"expected 3 channels, got shape {tuple(images.shape)}")
    flat = images.reshape(f * v, *images.shape[2:])
    if params is None:
        outs = backbone(flat)
    else:
        COUNTERS["ema_forward"] += 1
        outs = torch.func.functional_call(backbone, dict(params), (flat,))
    return FeaturePyramid([o.reshape(f, v, *o.shape[1:]) for o in outs], tuple(backbone.strides))


# --- EMA ---------------------------------------------------------------------


@dataclass
class EMAState:
    target: Dict[str, torch.Tensor]
    momentum: float = 0.99


def ema_init(online_params: Mapping[str, torch.Tensor], momentum: float = 0.99) -> EMAState:
    return EMAState({k: v.detach().clone() for k, v in online_params.items()}, momentum)


@torch.no_grad()
def ema_update(state: EMAState, online_params: Mapping[str, torch.Tensor], m: Optional[float] = None) -> EMAState:
    """``target <- m * target + (1 - m) * online``, elementwise."""
    m = state.momentum if m is None else m
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    new = {}
    for k, t in state.target.items():
        o = online_params[k].detach()
        if o.shape != t.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(t.shape)} vs {tuple(o.shape)}")
        new[k] = m * t + (1.0 - m) * o
    return EMAState(new, state.momentum)


# --- view transform -----------------------------------------------------------


def splat_cells(
    cameras: Sequence[CameraModel],
    affines: Optional[Sequence[np.ndarray]],
    bev_aug: Optional[BEVSimilarity],
    spec: BEVSpec,
    feat_hw: Tuple[int, int],
    stride: int,
    depths: np.ndarray,
) -> np.ndarray:
    """Flat BEV cell index for every (view, row, col, depth bin); -1 outside the grid.

    Feature cell ``(i, j)`` sits at augmented pixel ``((j + .5) * stride, (i + .5) * stride)``;
    it is mapped back through the inverse image affine, lifted along the camera
    ray to each depth, moved to ego, then through the BEV augmentation.
    """
    h, w = feat_hw
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([(jj + 0.5) * stride, (ii + 0.5) * stride, np.ones((h, w))], -1).reshape(-1, 3)
    bev_m = np.eye(3) if bev_aug is None else bev_aug.matrix3
    out = np.empty((len(cameras), h * w, len(depths)), dtype=np.int64)
    for k, cam in enumerate(cameras):
        p = pix if affines is None else pix @ np.linalg.inv(affines[k]).T
        rays = p @ np.linalg.inv(cam.intrinsic).T  # camera z == 1
        pts_cam = rays[:, None, :] * depths[None, :, None]
        ego = pts_cam @ cam.rotation.T + cam.translation
        ego = ego @ bev_m.T
        gx = np.floor((ego[..., 0] - spec.x_min) / spec.cell_x)
        gy = np.floor((ego[..., 1] - spec.y_min) / spec.cell_y)
        ok = (gx >= 0) & (gx < spec.grid_w) & (gy >= 0) & (gy < spec.grid_h)
        out[k] = np.where(ok, gy * spec.grid_w + gx, -1).astype(np.int64)
    return out.reshape(len(cameras), h, w, len(depths))


class LiftSplat(nn.Module):
    """Categorical depth per pixel, outer product with the pixel feature,
    sum-splat into BEV cells, then a 1x1 channel projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.level_channels[0]
        self.depth_head = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(inplace=True), nn.Conv2d(c, cfg.depth_bins, 1)
        )
        self.bev_proj = nn.Conv2d(c, cfg.bev_channels, 1, bias=False)  # empty cells stay zero
        self.depth_bins = cfg.depth_bins

    def depth_probs(self, feats: torch.Tensor) -> torch.Tensor:
        """``feats``: (N, C, H, W) -> (N, D, H, W) softmax over D."""
        return self.depth_head(feats).softmax(dim=1)

    def forward(self, level0: torch.Tensor, cells: torch.Tensor, spec: BEVSpec) -> BEVFeature:
        f, v, c, h, w = level0.shape
        probs = self.depth_probs(level0.reshape(f * v, c, h, w))
        grid = splat(level0, probs.reshape(f, v, self.depth_bins, h, w), cells, spec)
        return BEVFeature(self.bev_proj(grid), spec, 0)


class _SparseSplat(torch.autograd.Function):
    """``out = M @ feats`` with ``M[rows[k], cols[k]] += values[k]``.

    The value gradient is gathered in chunks so the dense ``M`` gradient is
    never materialized.
    """

    CHUNK = 1 << 18

    @staticmethod
    def forward(ctx, values, feats, rows, cols, n_rows):
        mat = torch.sparse_coo_tensor(torch.stack([rows, cols]), values, (n_rows, feats.shape[0]), check_invariants=False)
        ctx.save_for_backward(values, feats, rows, cols)
        ctx.n_rows = n_rows
        return torch.sparse.mm(mat, feats)

    @staticmethod
    def backward(ctx, grad_out):
        values, feats, rows, cols = ctx.saved_tensors
        grad_values = grad_feats = None
        if ctx.needs_input_grad[1]:
            mat_t = torch.sparse_coo_tensor(torch.stack([cols, rows]), values, (feats.shape[0], ctx.n_rows), check_invariants=False)
            grad_feats = torch.sparse.mm(mat_t, grad_out.contiguous())
        if ctx.needs_input_grad[0]:
            grad_values = torch.empty_like(values)
            for s in range(0, values.numel(), _SparseSplat.CHUNK):
                sl = slice(s, s + _SparseSplat.CHUNK)
                grad_values[sl] = torch.einsum("nc,nc->n", grad_out.index_select(0, rows[sl]), feats.index_select(0, cols[sl]))
        return grad_values, grad_feats, None, None, None


def splat(level0: torch.Tensor, probs: torch.Tensor, cells: torch.Tensor, spec: BEVSpec) -> torch.Tensor:
    """Sum ``probs[d] * feature`` of every pixel into its BEV cell.

    ``level0``: (F, V, C, H, W); ``probs``: (F, V, D, H, W);
    ``cells``: (F, V, H, W, D) int64 flat cell indices, -1 for dropped points.
    Returns (F, C, grid_h, grid_w).
    """
    f, v, c, h, w = level0.shape
    d = probs.shape[2]
    n_cells = spec.grid_h * spec.grid_w
    feats = level0.permute(0, 1, 3, 4, 2).reshape(f * v * h * w, c)
    p = probs.permute(0, 1, 3, 4, 2).reshape(-1)
    flat = cells.reshape(-1)
    valid = flat >= 0
    frame_off = torch.arange(f, device=cells.device).repeat_interleave(v * h * w * d) * n_cells
    rows = (flat + frame_off)[valid]
    cols = torch.arange(f * v * h * w, device=cells.device).repeat_interleave(d)[valid]
    out = _SparseSplat.apply(p[valid], feats, rows, cols, f * n_cells)
    return out.view(f, spec.grid_h, spec.grid_w, c).permute(0, 3, 1, 2).contiguous()


class ResidualBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.dw = nn.Conv2d(c, c, 3, padding=1, groups=c)
        self.pw1 = nn.Conv2d(c, c, 1)
        self.pw2 = nn.Conv2d(c, c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pw2(F.relu(self.pw1(self.dw(x))))

    def zero_residual(self) -> None:
        nn.init.zeros_(self.pw2.weight)
        nn.init.zeros_(self.pw2.bias)


class BEVRefine(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(ResidualBlock(cfg.bev_channels) for _ in range(cfg.n_layers))

    def forward(self, b: BEVFeature) -> List[BEVFeature]:
        if b.layer_index != 0:
            raise ValueError("refinement expects the layer-0 BEV feature")
        outs, x = [], b.grid
        for l, block in enumerate(self.blocks, start=1):
            x = block(x)
            outs.append(BEVFeature(x, b.spec, l))
        return outs


class DetectionHead(nn.Module):
    def __init__(self, cfg: ModelConfig, prior_prob: float = 0.01):
        super().__init__()
        c, hc = cfg.bev_channels, cfg.head_channels
        self.cls = nn.Sequential(nn.Conv2d(c, hc, 3, padding=1), nn.ReLU(inplace=True), nn.Conv2d(hc, cfg.n_classes, 1))
        self.reg = nn.Sequential(nn.Conv2d(c, hc, 3, padding=1), nn.ReLU(inplace=True), nn.Conv2d(hc, REG_CHANNELS, 1))
        nn.init.constant_(self.cls[-1].bias, -math.log((1 - prior_prob) / prior_prob))

    def forward(self, b: BEVFeature) -> DetectionOutput:
        return DetectionOutput(self.cls(b.grid), self.reg(b.grid))


class BEVDetector(nn.Module):
    """Online pipeline: backbone -> lift/splat -> refinement -> head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.lift = LiftSplat(cfg)
        self.refine = BEVRefine(cfg)
        self.head = DetectionHead(cfg)

    def bev_from_pyramid(self, pyr: FeaturePyramid, cells: torch.Tensor, spec: BEVSpec) -> List[BEVFeature]:
        """All BEV layers ``[B^0, B^1, ..., B^N]`` for a pyramid."""
        b0 = self.lift(pyr.features[0], cells, spec)
        return [b0] + self.refine(b0)


def lift_splat(
    pyramid: FeaturePyramid, cells: torch.Tensor, spec: BEVSpec, lift: LiftSplat
) -> BEVFeature:
    return lift(pyramid.features[0], cells, spec)


def bev_refine(b: BEVFeature, refine: BEVRefine) -> List[BEVFeature]:
    return refine(b)


def head_forward(b: BEVFeature, head: DetectionHead) -> DetectionOutput:
    return head(b)
