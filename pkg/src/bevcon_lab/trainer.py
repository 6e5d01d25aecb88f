"""Joint optimization of detection and the two contrast losses over synthetic scenes."""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import os
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml
from torch import nn

from .augment import AugConfig, AugmentedPair, AugmentedView, augment_pair, unaugmented_view
from .contrast import ContrastConfig, image_level_contrast, instance_contrast_multilayer, perspective_contrast
from .evaluation import MetricsReport, Prediction, decode_predictions, detection_loss, evaluate
from .geometry import BEVSpec, Box2D, Box3D
from .model import BEVDetector, EMAState, ModelConfig, backbone_forward, ema_init, ema_update, splat_cells
from .pooling import PoolConfig, ProjectionHead
from .scenegen import Scene, config_from_manifest, load_manifest, load_scene

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class DatasetMismatchError(RuntimeError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss ({value})")
        self.component = component


# --- config -------------------------------------------------------------------


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-2
    grad_clip: float = 35.0


@dataclass(frozen=True)
class AblationFlags:
    enable_instance: bool = True
    enable_perspective: bool = True
    enable_image_level_baseline: bool = False
    multilayer: bool = True
    scale_aware: bool = True
    detach_prime_bev: bool = False
    use_projection_head: bool = True
    det_on_both_branches: bool = False


@dataclass(frozen=True)
class EvalConfig:
    score_threshold: float = 0.05
    max_dets: int = 100
    batch_size: int = 8


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run. Serialized as ``config.yaml`` in the run directory."""

    dataset: str = "data"
    dataset_hash: str = ""  # scene generator config hash; empty accepts any dataset
    seed: int = 0
    epochs: int = 24
    batch_size: int = 8
    max_steps: Optional[int] = None
    val_fraction: float = 0.1
    lambda_in: float = 1.0
    lambda_pers: float = 1.0
    lambda_img: float = 1.0
    ema_momentum: float = 0.99
    optim: OptimConfig = OptimConfig()
    model: ModelConfig = ModelConfig()
    contrast: ContrastConfig = ContrastConfig()
    pool: PoolConfig = PoolConfig()
    aug: AugConfig = AugConfig()
    flags: AblationFlags = AblationFlags()
    eval: EvalConfig = EvalConfig()

    def __post_init__(self):
        if min(self.lambda_in, self.lambda_pers, self.lambda_img) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must be in [0, 1]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def with_overrides(self, overrides: Sequence[str]) -> "RunConfig":
        """Apply ``key.sub=value`` overrides; values are parsed as YAML scalars."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = yaml.safe_load(raw)
        return RunConfig.from_dict(d)


def _to_plain(x):
    if isinstance(x, dict):
        return {k: _to_plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_plain(v) for v in x]
    return x


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            v = _build(t, v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


# --- data ---------------------------------------------------------------------


class SceneDataset:
    """Read-only view over a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "manifest.json").exists():
            raise FileNotFoundError(f"no dataset manifest under {self.root}")
        self.manifest = load_manifest(self.root)
        self.gen_config = config_from_manifest(self.manifest)
        self.ids = [s["scene_id"] for s in self.manifest["scenes"]]

    @property
    def config_hash(self) -> str:
        return self.manifest["config_hash"]

    @property
    def bev(self) -> BEVSpec:
        return self.gen_config.bev

    def split(self, name: str, val_fraction: float) -> List[int]:
        """``val`` is the last ``ceil(n * val_fraction)`` scene ids, ``train`` the rest."""
        n_val = max(1, math.ceil(len(self.ids) * val_fraction)) if len(self.ids) > 1 else 0
        if name == "train":
            return self.ids[: len(self.ids) - n_val]
        if name == "val":
            return self.ids[len(self.ids) - n_val :]
        if name == "all":
            return list(self.ids)
        raise ConfigError(f"unknown split {name!r}")

    def load(self, scene_id: int) -> Scene:
        return load_scene(self.root, scene_id)


@dataclass
class Branch:
    images: torch.Tensor  # (F, V, 3, H, W)
    cells: torch.Tensor  # (F, V, h, w, D)
    boxes3d: List[List[Box3D]]
    boxes2d: List[List[Box2D]]


@dataclass
class Batch:
    a: Branch
    b: Optional[Branch]


def _stack_images(views: Sequence[AugmentedView]) -> torch.Tensor:
    arr = np.stack([np.stack(v.images) for v in views])  # (F, V, H, W, 3)
    return torch.from_numpy(arr).permute(0, 1, 4, 2, 3).contiguous().float()


def view_cells(view: AugmentedView, spec: BEVSpec, model_cfg: ModelConfig) -> np.ndarray:
    cam = view.cameras[0]
    stride = model_cfg.strides[0]
    feat_hw = (math.ceil(cam.image_height / stride), math.ceil(cam.image_width / stride))
    return splat_cells(view.cameras, view.image_affines(), view.bev_aug, spec, feat_hw, stride, model_cfg.depth_values)


def make_branch(views: Sequence[AugmentedView], spec: BEVSpec, model_cfg: ModelConfig) -> Branch:
    cells = torch.from_numpy(np.stack([view_cells(v, spec, model_cfg) for v in views]))
    return Branch(_stack_images(views), cells, [list(v.boxes3d) for v in views], [list(v.boxes2d) for v in views])


def make_batch(pairs: Sequence[AugmentedPair], spec: BEVSpec, model_cfg: ModelConfig, with_b: bool = True) -> Batch:
    a = make_branch([p.view_a for p in pairs], spec, model_cfg)
    b = make_branch([p.view_b for p in pairs], spec, model_cfg) if with_b else None
    return Batch(a, b)


def needs_second_branch(cfg: RunConfig) -> bool:
    f = cfg.flags
    return f.enable_instance or f.enable_perspective or f.enable_image_level_baseline or f.det_on_both_branches


def aug_seed(run_seed: int, epoch: int, scene_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([run_seed, epoch, scene_id])


# --- state and step -----------------------------------------------------------


@dataclass
class TrainState:
    config: RunConfig
    spec: BEVSpec
    model: BEVDetector
    heads: nn.ModuleDict
    optimizer: torch.optim.Optimizer
    ema: EMAState
    step: int = 0
    epoch: int = 0

    def parameters(self) -> List[nn.Parameter]:
        return list(self.model.parameters()) + list(self.heads.parameters())


def build_heads(cfg: RunConfig) -> nn.ModuleDict:
    heads = nn.ModuleDict()
    if not cfg.flags.use_projection_head:
        return heads
    if cfg.flags.enable_instance:
        heads["bev"] = ProjectionHead(cfg.model.bev_channels)
    if cfg.flags.enable_perspective:
        for j, c in enumerate(cfg.model.level_channels):
            heads[f"pers_{j}"] = ProjectionHead(c)
    return heads


def init_state(cfg: RunConfig, spec: BEVSpec) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = BEVDetector(cfg.model)
    heads = build_heads(cfg)
    params = list(model.parameters()) + list(heads.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    ema = ema_init(dict(model.backbone.named_parameters()), cfg.ema_momentum)
    return TrainState(cfg, spec, model, heads, opt, ema)


@dataclass
class LossReport:
    step: int
    L_det: float
    L_in: float
    L_in_layers: List[float]
    L_pers: float
    L_pers_levels: List[float]
    L_img: float
    L_total: float
    lambda_in: float
    lambda_pers: float
    lambda_img: float
    wall_time: float = 0.0

    def recombined(self) -> float:
        return self.lambda_in * self.L_in + self.lambda_pers * self.L_pers + self.lambda_img * self.L_img + self.L_det

    def to_record(self) -> dict:
        """Log record; wall time is left out so repeated runs give identical logs."""
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return {"kind": "step", **d}


def _check_finite(name: str, value: torch.Tensor) -> None:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLossError(name, v)


def compute_losses(state: TrainState, batch: Batch) -> Dict[str, Any]:
    """Forward both branches and return every loss component as a tensor."""
    cfg, spec, model = state.config, state.spec, state.model
    flags = cfg.flags
    zero = torch.zeros((), dtype=torch.float32)
    pyr_a = backbone_forward(model.backbone, batch.a.images)
    layers_a = model.bev_from_pyramid(pyr_a, batch.a.cells, spec)
    l_det = detection_loss(model.head(layers_a[-1]), batch.a.boxes3d, spec)

    l_in, l_in_layers = zero, []
    l_pers, l_pers_levels = zero, []
    l_img = zero
    if needs_second_branch(cfg):
        if batch.b is None:
            raise ValueError("batch lacks the second branch")
        with torch.no_grad():
            pyr_b = backbone_forward(model.backbone, batch.b.images, state.ema.target)
        pyr_b = pyr_b.detach()
        layers_b = None
        if flags.enable_instance or flags.det_on_both_branches:
            layers_b = model.bev_from_pyramid(pyr_b, batch.b.cells, spec)
            if flags.detach_prime_bev:
                layers_b = [dataclasses.replace(b, grid=b.grid.detach()) for b in layers_b]
        if flags.det_on_both_branches:
            l_det = 0.5 * (l_det + detection_loss(model.head(layers_b[-1]), batch.b.boxes3d, spec))
        if flags.enable_instance:
            pairs = [(la.grid, lb.grid) for la, lb in zip(layers_a[1:], layers_b[1:])]
            if not flags.multilayer:
                pairs = pairs[-1:]
            l_in, per = instance_contrast_multilayer(
                pairs, batch.a.boxes3d, batch.b.boxes3d, spec, cfg.pool, cfg.contrast, state.heads["bev"] if "bev" in state.heads else None
            )
            l_in_layers = per
        if flags.enable_perspective:
            gamma = cfg.pool.gamma if flags.scale_aware else 1.0
            heads = [state.heads[f"pers_{j}"] for j in range(pyr_a.n_levels)] if "pers_0" in state.heads else None
            l_pers, l_pers_levels = perspective_contrast(
                pyr_a, pyr_b, batch.a.boxes2d, batch.b.boxes2d, gamma, cfg.pool, cfg.contrast, heads
            )
        if flags.enable_image_level_baseline:
            l_img = image_level_contrast(pyr_a, pyr_b, cfg.contrast)
    return {
        "det": l_det,
        "in": l_in,
        "in_layers": l_in_layers,
        "pers": l_pers,
        "pers_levels": l_pers_levels,
        "img": l_img,
    }


def train_step(state: TrainState, batch: Batch) -> Tuple[TrainState, LossReport]:
    """One optimizer step on ``L_det + lambda_in * L_in + lambda_pers * L_pers (+ lambda_img * L_img)``."""
    t0 = time.perf_counter()
    cfg = state.config
    flags = cfg.flags
    state.model.train()
    losses = compute_losses(state, batch)
    for name in ("det", "in", "pers", "img"):
        _check_finite(name, losses[name])
    lam_in = cfg.lambda_in if flags.enable_instance else 0.0
    lam_pers = cfg.lambda_pers if flags.enable_perspective else 0.0
    lam_img = cfg.lambda_img if flags.enable_image_level_baseline else 0.0
    # accumulate in double so the logged total recombines from the logged parts
    total = losses["det"].double()
    if flags.enable_instance:
        total = lam_in * losses["in"].double() + total
    if flags.enable_perspective:
        total = lam_pers * losses["pers"].double() + total
    if flags.enable_image_level_baseline:
        total = lam_img * losses["img"].double() + total
    _check_finite("total", total)

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    torch.nn.utils.clip_grad_norm_(state.parameters(), cfg.optim.grad_clip)
    state.optimizer.step()
    state.ema = ema_update(state.ema, dict(state.model.backbone.named_parameters()))
    state.step += 1

    f = lambda t: float(t.detach())
    report = LossReport(
        step=state.step,
        L_det=f(losses["det"].double()),
        L_in=f(losses["in"].double()),
        L_in_layers=[f(x) for x in losses["in_layers"]],
        L_pers=f(losses["pers"].double()),
        L_pers_levels=[f(x) for x in losses["pers_levels"]],
        L_img=f(losses["img"].double()),
        L_total=f(total),
        lambda_in=lam_in,
        lambda_pers=lam_pers,
        lambda_img=lam_img,
        wall_time=time.perf_counter() - t0,
    )
    return state, report


# --- evaluation ---------------------------------------------------------------


@torch.no_grad()
def predict_scenes(
    model: BEVDetector, scenes: Sequence[Scene], spec: BEVSpec, eval_cfg: EvalConfig = EvalConfig()
) -> List[List[Prediction]]:
    """Online-branch inference on unaugmented scenes."""
    model.eval()
    preds: List[List[Prediction]] = []
    for s in range(0, len(scenes), eval_cfg.batch_size):
        chunk = [unaugmented_view(sc) for sc in scenes[s : s + eval_cfg.batch_size]]
        branch = make_branch(chunk, spec, model.cfg)
        pyr = backbone_forward(model.backbone, branch.images)
        out = model.head(model.bev_from_pyramid(pyr, branch.cells, spec)[-1])
        for i in range(len(chunk)):
            preds.append(decode_predictions(out, spec, eval_cfg.score_threshold, eval_cfg.max_dets, frame=i))
    return preds


def evaluate_model(
    model: BEVDetector, dataset: SceneDataset, ids: Sequence[int], eval_cfg: EvalConfig = EvalConfig()
) -> MetricsReport:
    scenes = [dataset.load(i) for i in ids]
    preds = predict_scenes(model, scenes, dataset.bev, eval_cfg)
    return evaluate(preds, [sc.boxes for sc in scenes])


# --- checkpoints and logs -----------------------------------------------------


def save_checkpoint(state: TrainState, path, dataset_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model": state.model.state_dict(),
        "heads": state.heads.state_dict(),
        "ema_target": dict(state.ema.target),
        "ema_momentum": state.ema.momentum,
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "config_hash": dataset_hash,
        "run_config": state.config.to_dict(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, spec: Optional[BEVSpec] = None) -> Tuple[TrainState, str]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = RunConfig.from_dict(payload["run_config"])
    state = init_state(cfg, spec or BEVSpec())
    state.model.load_state_dict(payload["model"])
    state.heads.load_state_dict(payload["heads"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.ema = EMAState(dict(payload["ema_target"]), payload["ema_momentum"])
    state.step, state.epoch = payload["step"], payload["epoch"]
    return state, payload["config_hash"]


def evaluate_checkpoint(ckpt, dataset, split: str = "val") -> MetricsReport:
    """Evaluate the online branch of a checkpoint on one dataset split."""
    ds = dataset if isinstance(dataset, SceneDataset) else SceneDataset(dataset)
    state, chash = load_checkpoint(ckpt, ds.bev)
    if chash and chash != ds.config_hash:
        raise DatasetMismatchError(f"checkpoint was trained on dataset {chash}, got {ds.config_hash}")
    cfg = state.config
    return evaluate_model(state.model, ds, ds.split(split, cfg.val_fraction), cfg.eval)


class MetricLog:
    """Append-only JSON-lines log plus a text record of every evaluation."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / "metrics.jsonl"
        self.text_path = run_dir / "metrics.txt"
        self.path.write_text("")
        self.text_path.write_text("")

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")

    def write_eval(self, epoch: int, step: int, report: MetricsReport) -> None:
        self.write({"kind": "eval", "epoch": epoch, "step": step, **report.to_dict()})
        with self.text_path.open("a") as fh:
            fh.write(f"# epoch {epoch} step {step}\n{report.to_text()}")


def read_metric_log(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# --- training loop ------------------------------------------------------------


def _resolve_dataset(cfg: RunConfig, base: Optional[Path]) -> SceneDataset:
    root = Path(cfg.dataset)
    if not root.is_absolute() and base is not None and not root.exists():
        root = base / root
    ds = SceneDataset(root)
    if cfg.dataset_hash and cfg.dataset_hash != ds.config_hash:
        raise DatasetMismatchError(f"config expects dataset {cfg.dataset_hash}, found {ds.config_hash}")
    return ds


def iter_batches(cfg: RunConfig, train_ids: Sequence[int], epoch: int) -> Iterable[List[int]]:
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_ids))
    ids = [train_ids[k] for k in order]
    for s in range(0, len(ids), cfg.batch_size):
        yield ids[s : s + cfg.batch_size]


def train(cfg: RunConfig, out_dir, config_base: Optional[Path] = None, log_fn=None) -> Path:
    """Run the full schedule. Writes ``config.yaml``, ``metrics.jsonl``,
    ``metrics.txt`` and ``checkpoints/`` under ``out_dir``; returns the final checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _resolve_dataset(cfg, config_base)
    if not cfg.dataset_hash:
        cfg = dataclasses.replace(cfg, dataset_hash=ds.config_hash)
    cfg.save(out / "config.yaml")
    spec = ds.bev
    state = init_state(cfg, spec)
    log = MetricLog(out)
    train_ids = ds.split("train", cfg.val_fraction)
    val_ids = ds.split("val", cfg.val_fraction)
    ckpt_dir = out / "checkpoints"
    with_b = needs_second_branch(cfg)

    def checkpoint_and_eval(epoch: int) -> Path:
        path = ckpt_dir / f"epoch_{epoch:03d}.pt"
        save_checkpoint(state, path, ds.config_hash)
        report = evaluate_model(state.model, ds, val_ids, cfg.eval)
        log.write_eval(epoch, state.step, report)
        if log_fn:
            log_fn(f"epoch {epoch} step {state.step} mAP {report.mAP:.4f} mATE {report.mATE:.4f} mAOE {report.mAOE:.4f}")
        return path

    if cfg.epochs == 0:
        return checkpoint_and_eval(0)
    path = None
    done = False
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        for ids in iter_batches(cfg, train_ids, epoch):
            pairs = [
                augment_pair(ds.load(i), aug_seed(cfg.seed, epoch, i), cfg.aug, spec, images_b=with_b) for i in ids
            ]
            batch = make_batch(pairs, spec, cfg.model, with_b)
            state, report = train_step(state, batch)
            log.write({"epoch": epoch, **report.to_record()})
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                done = True
                break
        path = checkpoint_and_eval(epoch)
        if done:
            break
    return path


# --- ablation lattice ---------------------------------------------------------

_ALL_OFF = dict(
    enable_instance=False,
    enable_perspective=False,
    enable_image_level_baseline=False,
    multilayer=False,
    scale_aware=False,
)

ABLATION_ROWS: Dict[str, Dict[str, Any]] = {
    "baseline": {"flags": dict(_ALL_OFF)},
    "ins": {"flags": {**_ALL_OFF, "enable_instance": True}, "pool": {"pool_mode": "gather"}},
    "ins_align": {"flags": {**_ALL_OFF, "enable_instance": True}},
    "ins_align_mlc": {"flags": {**_ALL_OFF, "enable_instance": True, "multilayer": True}},
    "pers_scale": {"flags": {**_ALL_OFF, "enable_perspective": True, "scale_aware": True}},
    "all_no_scale": {"flags": {**_ALL_OFF, "enable_instance": True, "multilayer": True, "enable_perspective": True}},
    "all": {"flags": {**_ALL_OFF, "enable_instance": True, "multilayer": True, "enable_perspective": True, "scale_aware": True}},
    "image_level": {"flags": {**_ALL_OFF, "enable_image_level_baseline": True}},
}


def ablation_config(base: RunConfig, row: str, seed: Optional[int] = None) -> RunConfig:
    """``base`` with the row's flag set applied (and optionally a new seed)."""
    if row not in ABLATION_ROWS:
        raise ConfigError(f"unknown ablation row {row!r}")
    d = base.to_dict()
    for section, values in ABLATION_ROWS[row].items():
        d[section].update(values)
    if seed is not None:
        d["seed"] = seed
    return RunConfig.from_dict(d)


def flag_summary(cfg: RunConfig) -> str:
    f = cfg.flags
    parts = []
    if f.enable_instance:
        parts.append("ins" + ("+align" if cfg.pool.pool_mode == "align" else "") + ("+mlc" if f.multilayer else ""))
    if f.enable_perspective:
        parts.append("pers" + ("+scale" if f.scale_aware else ""))
    if f.enable_image_level_baseline:
        parts.append("img")
    return ",".join(parts) or "none"


def final_eval(run_dir) -> dict:
    evals = [r for r in read_metric_log(Path(run_dir) / "metrics.jsonl") if r.get("kind") == "eval"]
    if not evals:
        raise RuntimeError(f"no evaluation record in {run_dir}")
    return evals[-1]
