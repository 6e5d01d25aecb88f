"""Contrastive objectives over pooled instance features.

The per-anchor loss for anchor ``i`` and positive ``p`` is::

    l = -log( exp(s_ip / tau) / sum_{j in negatives(i)} exp(s_ij / tau) )

with the positive left out of the denominator unless
``include_positive_in_denominator`` is set (the SimCLR form).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import torch

from .geometry import BEVSpec, Box2D, Box3D
from .instrument import COUNTERS
from .pooling import InstanceFeatures, PoolConfig, pool_instances_bev, pool_instances_image


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.2
    epsilon: float = 0.5
    include_positive_in_denominator: bool = False
    symmetric: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


class ContrastInputError(ValueError):
    pass


def _directional_terms(za, ids_a, zb, ids_b, cfg: ContrastConfig) -> torch.Tensor:
    ia = torch.as_tensor(ids_a).view(-1, 1)
    ib = torch.as_tensor(ids_b).view(1, -1)
    pos = ia == ib
    rows = (~pos).any(dim=1)
    if not bool(rows.any()):
        return za.new_zeros(0)
    sims = za[rows] @ zb.t() / cfg.tau
    pos = pos[rows]
    neg_lse = torch.logsumexp(sims.masked_fill(pos, float("-inf")), dim=1, keepdim=True)
    if cfg.include_positive_in_denominator:
        denom = torch.logaddexp(neg_lse.expand_as(sims), sims)
    else:
        denom = neg_lse.expand_as(sims)
    return (denom - sims)[pos]


def contrast_terms(
    za: torch.Tensor, ids_a: Sequence[int], zb: torch.Tensor, ids_b: Sequence[int], cfg: ContrastConfig
) -> torch.Tensor:
    """Every (anchor, positive) loss term between two branches.

    Features with equal ids across branches are positives of each other,
    all different-id features of the other branch are negatives. Anchors
    with no negative contribute nothing.
    """
    if len(ids_a) == 0 or len(ids_b) == 0:
        return za.new_zeros(0)
    terms = _directional_terms(za, list(ids_a), zb, list(ids_b), cfg)
    if cfg.symmetric:
        terms = torch.cat([terms, _directional_terms(zb, list(ids_b), za, list(ids_a), cfg)])
    return terms


def _check_unit(z: torch.Tensor, name: str, tol: float = 1e-5) -> None:
    if z.numel() and (z.norm(dim=-1) - 1.0).abs().max().item() > tol:
        raise ContrastInputError(f"{name} rows are not unit-norm")


def info_nce_terms(f: InstanceFeatures, f_prime: InstanceFeatures, cfg: ContrastConfig) -> torch.Tensor:
    if list(f.ids) != list(f_prime.ids):
        raise ContrastInputError("feature sets are not aligned by instance id")
    if len(set(f.ids)) != len(f.ids):
        raise ContrastInputError("instance ids must be unique")
    _check_unit(f.vectors, "f")
    _check_unit(f_prime.vectors, "f_prime")
    if len(f) < 2:
        return f.vectors.new_zeros(0)
    return contrast_terms(f.vectors, f.ids, f_prime.vectors, f_prime.ids, cfg)


def info_nce(f: InstanceFeatures, f_prime: InstanceFeatures, cfg: ContrastConfig = ContrastConfig()) -> torch.Tensor:
    """Mean per-anchor loss over ``n`` (or ``2n`` when symmetric) anchors; 0 when ``n < 2``."""
    COUNTERS["contrast"] += 1
    terms = info_nce_terms(f, f_prime, cfg)
    return terms.mean() if terms.numel() else f.vectors.new_zeros(())


def align_by_id(a: InstanceFeatures, b: InstanceFeatures) -> Tuple[InstanceFeatures, InstanceFeatures]:
    """Restrict two unique-id feature sets to their shared ids, in ``a``'s order."""
    pos_b = {i: k for k, i in enumerate(b.ids)}
    rows_a = [k for k, i in enumerate(a.ids) if i in pos_b]
    rows_b = [pos_b[a.ids[k]] for k in rows_a]
    ids = [a.ids[k] for k in rows_a]
    return (
        InstanceFeatures(ids, a.vectors[rows_a], a.source),
        InstanceFeatures(ids, b.vectors[rows_b], b.source),
    )


def multilayer_weights(n_layers: int, epsilon: float) -> List[float]:
    """``1 / epsilon ** (n_layers - l)`` for ``l = 1..n_layers``."""
    return [1.0 / epsilon ** (n_layers - l) for l in range(1, n_layers + 1)]


def _mean_or_zero(terms: List[torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    terms = [t for t in terms if t.numel()]
    if not terms:
        return like.new_zeros(())
    return torch.cat(terms).mean()


def instance_contrast_multilayer(
    bev_layers: Sequence[Tuple[torch.Tensor, torch.Tensor]],
    boxes_a: Sequence[Sequence[Box3D]],
    boxes_b: Sequence[Sequence[Box3D]],
    spec: BEVSpec,
    pool_cfg: PoolConfig = PoolConfig(),
    cfg: ContrastConfig = ContrastConfig(),
    head: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Weighted sum over layers of the per-layer instance loss.

    ``bev_layers[l-1]`` is the pair ``(B^l, B'^l)`` of ``(frames, C, H, W)`` grids;
    ``boxes_a[i]`` / ``boxes_b[i]`` are frame ``i``'s boxes in each branch's
    augmented BEV frame. Per layer, anchor losses from every frame are summed
    and divided by the total anchor count.
    """
    COUNTERS["contrast"] += 1
    if not bev_layers:
        raise ContrastInputError("no BEV layers given")
    n_frames = bev_layers[0][0].shape[0]
    if len(boxes_a) != n_frames or len(boxes_b) != n_frames:
        raise ContrastInputError("box lists do not match the frame count")
    per_layer = []
    for grid_a, grid_b in bev_layers:
        if grid_a.shape != grid_b.shape or grid_a.shape[0] != n_frames:
            raise ContrastInputError("layer shapes differ between branches")
        terms = []
        for i in range(n_frames):
            fa = pool_instances_bev(grid_a[i], boxes_a[i], spec, pool_cfg, head)
            fb = pool_instances_bev(grid_b[i], boxes_b[i], spec, pool_cfg, head)
            fa, fb = align_by_id(fa, fb)
            if len(fa) >= 2:
                terms.append(info_nce_terms(fa, fb, cfg))
        per_layer.append(_mean_or_zero(terms, grid_a))
    weights = multilayer_weights(len(per_layer), cfg.epsilon)
    total = sum(w * l for w, l in zip(weights, per_layer))
    return total, per_layer


def perspective_contrast(
    pyr_a,
    pyr_b,
    boxes2d_a: Sequence[Sequence[Box2D]],
    boxes2d_b: Sequence[Sequence[Box2D]],
    gamma: float,
    pool_cfg: PoolConfig = PoolConfig(),
    cfg: ContrastConfig = ContrastConfig(),
    heads: Optional[Sequence[Callable[[torch.Tensor], torch.Tensor]]] = None,
) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Average over pyramid levels of the regional contrast loss.

    Each visible (instance, view) yields one anchor; same-id features across
    branches are positives, different ids negatives. Levels without any
    term are excluded from the average.
    """
    COUNTERS["contrast"] += 1
    if pyr_a.n_levels != pyr_b.n_levels:
        raise ContrastInputError("pyramids have different level counts")
    n_frames = pyr_a.features[0].shape[0]
    level_terms: List[List[torch.Tensor]] = [[] for _ in range(pyr_a.n_levels)]
    for i in range(n_frames):
        fa = pool_instances_image([f[i] for f in pyr_a.features], pyr_a.strides, boxes2d_a[i], gamma, pool_cfg, heads)
        fb = pool_instances_image([f[i] for f in pyr_b.features], pyr_b.strides, boxes2d_b[i], gamma, pool_cfg, heads)
        for j, (a, b) in enumerate(zip(fa, fb)):
            shared = set(a.ids) & set(b.ids)
            if len(shared) < 2:
                continue
            ra = [k for k, x in enumerate(a.ids) if x in shared]
            rb = [k for k, x in enumerate(b.ids) if x in shared]
            level_terms[j].append(
                contrast_terms(a.vectors[ra], [a.ids[k] for k in ra], b.vectors[rb], [b.ids[k] for k in rb], cfg)
            )
    like = pyr_a.features[0]
    per_level = [_mean_or_zero(t, like) for t in level_terms]
    active = [l for l, t in zip(per_level, level_terms) if any(x.numel() for x in t)]
    total = torch.stack(active).mean() if active else like.new_zeros(())
    return total, per_level


def image_level_contrast(pyr_a, pyr_b, cfg: ContrastConfig = ContrastConfig()) -> torch.Tensor:
    """Whole-image baseline: one pooled vector per view, same view across branches is
    the positive, the frame's other views are negatives."""
    COUNTERS["contrast"] += 1
    fa, fb = pyr_a.features[0], pyr_b.features[0]
    n_frames, n_views = fa.shape[:2]
    if n_views < 2:
        return fa.new_zeros(())
    za = torch.nn.functional.normalize(fa.mean(dim=(-2, -1)), dim=-1)
    zb = torch.nn.functional.normalize(fb.mean(dim=(-2, -1)), dim=-1)
    ids = list(range(n_views))
    terms = [contrast_terms(za[i], ids, zb[i], ids, cfg) for i in range(n_frames)]
    return _mean_or_zero(terms, fa)
