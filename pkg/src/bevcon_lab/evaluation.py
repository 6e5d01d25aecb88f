"""Toy detection loss, prediction decoding and center-distance detection metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import BEVSpec, Box3D, wrap_angle
from .model import REG_CHANNELS, DetectionOutput
from .scenegen import CLASS_DIMS

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
REG_WEIGHT = 1.0
NMS_RADIUS = 0.5
DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
LOG_DIM_CLAMP = 5.0


# --- loss ---------------------------------------------------------------------


def box_cell(box: Box3D, spec: BEVSpec) -> Optional[Tuple[int, int]]:
    """``(row, col)`` of the cell containing the box center, or None off-grid."""
    gx, gy = spec.to_grid(box.center[0], box.center[1])
    col, row = math.floor(gx), math.floor(gy)
    if 0 <= col < spec.grid_w and 0 <= row < spec.grid_h:
        return row, col
    return None


def encode_box(box: Box3D, spec: BEVSpec, row: int, col: int) -> List[float]:
    gx, gy = spec.to_grid(box.center[0], box.center[1])
    return [
        gx - (col + 0.5),
        gy - (row + 0.5),
        box.center[2],
        math.log(box.l),
        math.log(box.w),
        math.sin(box.yaw),
        math.cos(box.yaw),
    ]


def build_targets(
    boxes: Sequence[Sequence[Box3D]], spec: BEVSpec, n_classes: int, dtype=torch.float32
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-frame dense targets.

    Returns ``(cls (F, K, H, W), reg (F, 7, H, W), pos (F, H, W) bool)``. When
    two centers share a cell the later box in the list wins.
    """
    n = len(boxes)
    cls = torch.zeros(n, n_classes, spec.grid_h, spec.grid_w, dtype=dtype)
    reg = torch.zeros(n, REG_CHANNELS, spec.grid_h, spec.grid_w, dtype=dtype)
    pos = torch.zeros(n, spec.grid_h, spec.grid_w, dtype=torch.bool)
    for i, frame in enumerate(boxes):
        for box in frame:
            rc = box_cell(box, spec)
            if rc is None or not 0 <= box.class_id < n_classes:
                continue
            row, col = rc
            cls[i, :, row, col] = 0.0
            cls[i, box.class_id, row, col] = 1.0
            reg[i, :, row, col] = torch.tensor(encode_box(box, spec, row, col), dtype=dtype)
            pos[i, row, col] = True
    return cls, reg, pos


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Elementwise sigmoid focal loss (unreduced)."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * (1 - p_t) ** gamma * ce


def detection_loss(out: DetectionOutput, boxes: Sequence[Sequence[Box3D]], spec: BEVSpec) -> torch.Tensor:
    """Focal classification over every cell plus L1 regression at positive cells.

    Both terms are summed over the batch and divided by ``max(1, num_pos)``.
    """
    logits = out.class_logits
    cls_t, reg_t, pos = build_targets(boxes, spec, logits.shape[1], logits.dtype)
    norm = max(1, int(pos.sum()))
    loss_cls = focal_loss(logits, cls_t).sum() / norm
    if not bool(pos.any()):
        return loss_cls
    mask = pos.unsqueeze(1).expand_as(reg_t)
    loss_reg = (out.box_reg[mask] - reg_t[mask]).abs().sum() / norm
    return loss_cls + REG_WEIGHT * loss_reg


# --- decoding -----------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    box: Box3D
    score: float
    class_id: int
    cell_index: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@torch.no_grad()
def decode_predictions(
    out: DetectionOutput,
    spec: BEVSpec,
    score_threshold: float = 0.05,
    max_dets: int = 100,
    frame: int = 0,
    nms_radius: float = NMS_RADIUS,
) -> List[Prediction]:
    """Decode one frame: per-cell argmax class, greedy BEV-center NMS, top ``max_dets``."""
    logits = out.class_logits[frame].double()
    reg = out.box_reg[frame].double().numpy()
    scores, classes = torch.sigmoid(logits).max(dim=0)
    scores, classes = scores.numpy().ravel(), classes.numpy().ravel()
    cand = np.nonzero(scores >= score_threshold)[0]
    order = sorted(cand.tolist(), key=lambda k: (-scores[k], k))
    kept: List[Prediction] = []
    centers: List[Tuple[float, float]] = []
    for k in order:
        if len(kept) >= max_dets:
            break
        row, col = divmod(k, spec.grid_w)
        r = reg[:, row, col]
        x, y = (float(v) for v in spec.to_metric(col + 0.5 + r[0], row + 0.5 + r[1]))
        if any((x - cx) ** 2 + (y - cy) ** 2 <= nms_radius**2 for cx, cy in centers):
            continue
        c = int(classes[k])
        box = Box3D(
            (x, y, float(r[2])),
            math.exp(float(np.clip(r[3], -LOG_DIM_CLAMP, LOG_DIM_CLAMP))),
            math.exp(float(np.clip(r[4], -LOG_DIM_CLAMP, LOG_DIM_CLAMP))),
            CLASS_DIMS[c][2] if c < len(CLASS_DIMS) else 1.0,
            math.atan2(float(r[5]), float(r[6])),
            c,
            k,
        )
        kept.append(Prediction(box, float(scores[k]), c, k))
        centers.append((x, y))
    return kept


# --- metrics ------------------------------------------------------------------


@dataclass
class ClassMetrics:
    n_gt: int
    ap: Dict[float, float]
    ate: Optional[float]
    aoe: Optional[float]

    @property
    def mean_ap(self) -> float:
        return float(np.mean(list(self.ap.values())))


@dataclass
class MetricsReport:
    mAP: float
    mATE: float
    mAOE: float
    per_class: Dict[int, ClassMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "mATE": self.mATE,
            "mAOE": self.mAOE,
            "per_class": {
                str(c): {"n_gt": m.n_gt, "ap": {str(d): v for d, v in m.ap.items()}, "ate": m.ate, "aoe": m.aoe}
                for c, m in sorted(self.per_class.items())
            },
        }

    def to_text(self) -> str:
        """One ``name value`` line per metric, 6 decimals."""
        lines = [f"mAP {self.mAP:.6f}", f"mATE {self.mATE:.6f}", f"mAOE {self.mAOE:.6f}"]
        for c, m in sorted(self.per_class.items()):
            for d, v in m.ap.items():
                lines.append(f"class_{c}.AP@{d:g} {v:.6f}")
            if m.ate is not None:
                lines.append(f"class_{c}.ATE {m.ate:.6f}")
                lines.append(f"class_{c}.AOE {m.aoe:.6f}")
        return "\n".join(lines) + "\n"


def interpolated_ap(precision: np.ndarray, recall: np.ndarray, n_points: int = 101) -> float:
    """Mean over recall levels ``r`` of the best precision reached at recall >= r."""
    if precision.size == 0:
        return 0.0
    # running max from the right gives the best precision at recall >= recall[i]
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.linspace(0.0, 1.0, n_points)
    idx = np.searchsorted(recall, levels - 1e-12, side="left")
    vals = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(vals.mean())


def _sorted_class_preds(preds: Sequence[Sequence[Prediction]], c: int) -> List[Tuple[int, Prediction]]:
    items = [(s, p) for s, scene in enumerate(preds) for p in scene if p.class_id == c]
    items.sort(key=lambda t: (-t[1].score, t[0], t[1].cell_index, t[1].box.center[0], t[1].box.center[1]))
    return items


def match_class(
    preds: Sequence[Sequence[Prediction]], gts: Sequence[Sequence[Box3D]], c: int, threshold: float
) -> Tuple[np.ndarray, List[Tuple[float, float]]]:
    """Greedy matching by descending score. Returns the TP flags in ranked order
    and ``(center distance, |yaw error|)`` for every match."""
    gt_c = [[g for g in scene if g.class_id == c] for scene in gts]
    used = [np.zeros(len(g), dtype=bool) for g in gt_c]
    tp, errors = [], []
    for s, p in _sorted_class_preds(preds, c):
        best, best_d = -1, math.inf
        for k, g in enumerate(gt_c[s] if s < len(gt_c) else []):
            if used[s][k]:
                continue
            d = math.hypot(p.box.center[0] - g.center[0], p.box.center[1] - g.center[1])
            if d <= threshold and d < best_d:
                best, best_d = k, d
        if best >= 0:
            used[s][best] = True
            tp.append(True)
            errors.append((best_d, abs(wrap_angle(p.box.yaw - gt_c[s][best].yaw))))
        else:
            tp.append(False)
    return np.array(tp, dtype=bool), errors


def evaluate(
    preds: Sequence[Sequence[Prediction]],
    gts: Sequence[Sequence[Box3D]],
    thresholds: Sequence[float] = DIST_THRESHOLDS,
    tp_threshold: float = TP_THRESHOLD,
) -> MetricsReport:
    """Center-distance AP per class and threshold; classes without GT are skipped.

    With no true positive at ``tp_threshold`` a class's translation and
    orientation errors fall back to ``tp_threshold`` and pi.
    """
    classes = sorted({g.class_id for scene in gts for g in scene})
    per_class: Dict[int, ClassMetrics] = {}
    for c in classes:
        n_gt = sum(1 for scene in gts for g in scene if g.class_id == c)
        ap = {}
        for d in thresholds:
            tp, _ = match_class(preds, gts, c, d)
            ctp = np.cumsum(tp)
            cfp = np.cumsum(~tp)
            precision = ctp / np.maximum(ctp + cfp, 1)
            ap[float(d)] = interpolated_ap(precision, ctp / n_gt)
        _, errors = match_class(preds, gts, c, tp_threshold)
        ate = float(np.mean([e[0] for e in errors])) if errors else None
        aoe = float(np.mean([e[1] for e in errors])) if errors else None
        per_class[c] = ClassMetrics(n_gt, ap, ate, aoe)
    if not per_class:
        return MetricsReport(0.0, tp_threshold, math.pi, {})
    m_ap = float(np.mean([m.mean_ap for m in per_class.values()]))
    m_ate = float(np.mean([tp_threshold if m.ate is None else m.ate for m in per_class.values()]))
    m_aoe = float(np.mean([math.pi if m.aoe is None else m.aoe for m in per_class.values()]))
    return MetricsReport(m_ap, m_ate, m_aoe, per_class)
