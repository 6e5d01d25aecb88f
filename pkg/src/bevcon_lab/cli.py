"""Command-line entry point: ``bevcon-lab {gen-data,train,eval,ablate,plot-bev}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import statistics
import subprocess
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import yaml
from PIL import Image, ImageDraw

from .evaluation import Prediction
from .geometry import BEVSpec, Box3D
from .scenegen import SceneGenConfig, generate_dataset

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

GT_COLOR = (40, 200, 60)
PRED_COLOR = (40, 90, 240)
PX_PER_CELL = 8

# Test hook: when set, plot-bev draws ``PREDICTION_HOOK(scene)`` instead of model predictions.
PREDICTION_HOOK: Optional[Callable[[object], List[Prediction]]] = None


@dataclass
class CommandResult:
    exit_code: int
    summary: str


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def max_workers() -> int:
    raw = os.environ.get("BEVCON_LAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise UsageError(f"BEVCON_LAB_THREADS must be an integer, got {raw!r}")
    return os.cpu_count() or 1


def _claim_out(path: Path, force: bool, marker: str, stage: str) -> None:
    """Refuse to reuse a non-empty ``path`` unless ``force``; only ever delete our own outputs."""
    if not path.exists() or not any(path.iterdir()):
        return
    if not force:
        raise StageError(stage, f"output {path} exists; pass --force to overwrite")
    if not (path / marker).exists():
        raise StageError(stage, f"refusing to delete {path}: it has no {marker}")
    shutil.rmtree(path)


# --- subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> str:
    cfg_dict = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    cfg_dict = cfg_dict or {}
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    try:
        cfg = SceneGenConfig(**cfg_dict)
    except (TypeError, ValueError) as e:
        raise StageError("gen-data", f"bad scene config: {e}")
    out = Path(args.out)
    _claim_out(out, args.force, "manifest.json", "gen-data")
    manifest = generate_dataset(cfg, args.n_scenes, out)
    return f"gen-data: wrote {len(manifest['scenes'])} scenes to {out} (config {manifest['config_hash']})"


def _load_run_config(args):
    from .trainer import ConfigError, RunConfig

    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(args.set or [])
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
    except ConfigError as e:
        raise UsageError(f"config: {e}")
    base = Path(args.config).resolve().parent if args.config else None
    return cfg, base


def cmd_train(args) -> str:
    from .trainer import train

    cfg, base = _load_run_config(args)
    out = Path(args.out)
    _claim_out(out, args.force, "config.yaml", "train")
    ckpt = train(cfg, out, config_base=base, log_fn=lambda m: print(m, flush=True))
    return f"train: final checkpoint {ckpt}"


def cmd_eval(args) -> str:
    from .trainer import evaluate_checkpoint

    report = evaluate_checkpoint(args.checkpoint, args.dataset, args.split)
    text = report.to_text()
    if args.out:
        out = Path(args.out)
        if out.exists() and not args.force:
            raise StageError("eval", f"output {out} exists; pass --force to overwrite")
        out.write_text(text)
    print(text, end="")
    return f"eval: mAP {report.mAP:.6f} mATE {report.mATE:.6f} mAOE {report.mAOE:.6f}"


def _run_train_subprocess(cfg_path: Path, run_dir: Path) -> int:
    log = run_dir.parent / f"{run_dir.name}.log"
    with log.open("w") as fh:
        proc = subprocess.run(
            [sys.executable, "-m", "bevcon_lab.cli", "train", "--config", str(cfg_path), "--out", str(run_dir), "--force"],
            stdout=fh,
            stderr=subprocess.STDOUT,
        )
    return proc.returncode


def _run_complete(run_dir: Path, cfg) -> bool:
    from .trainer import RunConfig, final_eval

    try:
        saved = RunConfig.load(run_dir / "config.yaml")
        done = final_eval(run_dir)
    except (OSError, RuntimeError, ValueError):
        return False
    same = dataclasses.replace(saved, dataset_hash="", dataset="") == dataclasses.replace(cfg, dataset_hash="", dataset="")
    return same and done["epoch"] == cfg.epochs


def ablation_setup(base, seeds: Sequence[int]) -> dict:
    """Dataset and schedule facts that the ablation medians depend on."""
    from .trainer import SceneDataset

    ds = SceneDataset(base.dataset)
    g = ds.gen_config
    return {
        "dataset_hash": ds.config_hash,
        "n_scenes": len(ds.ids),
        "n_views": g.n_views,
        "image_height": g.image_height,
        "image_width": g.image_width,
        "bev_h": g.bev.grid_h,
        "bev_w": g.bev.grid_w,
        "epochs": base.epochs,
        "max_steps": base.max_steps,
        "seeds": list(seeds),
    }


def ablation_table(rows: Sequence[dict]) -> str:
    lines = [
        "| row | flags | seeds | mAP (median) | mATE (median) | mAOE (median) |",
        "|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r['row']} | {r['flags']} | {','.join(str(s) for s in r['seeds'])} | "
            f"{r['mAP']:.6f} | {r['mATE']:.6f} | {r['mAOE']:.6f} |"
        )
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> str:
    from .trainer import ABLATION_ROWS, ablation_config, final_eval, flag_summary

    base, cfg_base = _load_run_config(args)
    rows = args.rows or list(ABLATION_ROWS)
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise UsageError(f"unknown ablation rows {unknown}; choose from {list(ABLATION_ROWS)}")
    seeds = args.seeds if args.seeds else [base.seed]
    out = Path(args.out)
    if not args.resume:
        _claim_out(out, args.force, "ablation.json", "ablate")
    out.mkdir(parents=True, exist_ok=True)
    if cfg_base is not None and not Path(base.dataset).is_absolute():
        base = dataclasses.replace(base, dataset=str((cfg_base / base.dataset).resolve()))

    jobs = []
    for row in rows:
        for seed in seeds:
            cfg = ablation_config(base, row, seed)
            run_dir = out / f"{row}_seed{seed}"
            if args.resume and _run_complete(run_dir, cfg):
                continue
            cfg_path = out / f"{row}_seed{seed}.yaml"
            cfg.save(cfg_path)
            jobs.append((row, seed, cfg_path, run_dir))
    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        codes = list(pool.map(lambda j: _run_train_subprocess(j[2], j[3]), jobs))
    failed = [f"{j[0]}_seed{j[1]}" for j, c in zip(jobs, codes) if c != 0]
    if failed:
        raise StageError("ablate", f"training failed for {failed}; see the .log files in {out}")

    records = []
    for row in rows:
        cfg = ablation_config(base, row)
        per_seed = {s: final_eval(out / f"{row}_seed{s}") for s in seeds}
        records.append(
            {
                "row": row,
                "flags": flag_summary(cfg),
                "flag_set": dataclasses.asdict(cfg.flags) | {"pool_mode": cfg.pool.pool_mode},
                "seeds": list(seeds),
                "per_seed": {str(s): {k: e[k] for k in ("mAP", "mATE", "mAOE")} for s, e in per_seed.items()},
                "mAP": statistics.median(e["mAP"] for e in per_seed.values()),
                "mATE": statistics.median(e["mATE"] for e in per_seed.values()),
                "mAOE": statistics.median(e["mAOE"] for e in per_seed.values()),
            }
        )
    (out / "ablation.json").write_text(json.dumps(records, indent=2))
    (out / "setup.json").write_text(json.dumps(ablation_setup(base, seeds), indent=2))
    table = ablation_table(records)
    (out / "ablation.md").write_text(table)
    print(table, end="")
    return f"ablate: {len(records)} rows x {len(seeds)} seeds written to {out / 'ablation.md'}"


def bev_polygon(box: Box3D, spec: BEVSpec) -> List[tuple]:
    """Box footprint corners in plot pixels (row = gy, col = gx)."""
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    pts = []
    for sx, sy in ((1, 1), (1, -1), (-1, -1), (-1, 1)):
        x = box.center[0] + c * sx * box.l / 2 - s * sy * box.w / 2
        y = box.center[1] + s * sx * box.l / 2 + c * sy * box.w / 2
        gx, gy = spec.to_grid(x, y)
        pts.append((float(gx) * PX_PER_CELL, float(gy) * PX_PER_CELL))
    return pts


def render_bev_plot(gts: Sequence[Box3D], preds: Sequence[Prediction], spec: BEVSpec) -> Image.Image:
    """GT footprints in green, predictions in blue, drawn over the BEV grid."""
    img = Image.new("RGB", (spec.grid_w * PX_PER_CELL, spec.grid_h * PX_PER_CELL), (20, 20, 20))
    draw = ImageDraw.Draw(img)
    for k in range(0, spec.grid_w + 1, 8):
        draw.line([(k * PX_PER_CELL, 0), (k * PX_PER_CELL, img.height)], fill=(45, 45, 45))
    for k in range(0, spec.grid_h + 1, 8):
        draw.line([(0, k * PX_PER_CELL), (img.width, k * PX_PER_CELL)], fill=(45, 45, 45))
    for box in gts:
        draw.polygon(bev_polygon(box, spec), outline=GT_COLOR)
    for p in preds:
        draw.polygon(bev_polygon(p.box, spec), outline=PRED_COLOR)
    return img


def cmd_plot_bev(args) -> str:
    from .trainer import SceneDataset, load_checkpoint, predict_scenes

    ds = SceneDataset(args.dataset)
    if args.scene_id not in ds.ids:
        raise StageError("plot-bev", f"scene {args.scene_id} not in dataset")
    scene = ds.load(args.scene_id)
    if PREDICTION_HOOK is not None:
        preds = PREDICTION_HOOK(scene)
    else:
        state, _ = load_checkpoint(args.checkpoint, ds.bev)
        preds = predict_scenes(state.model, [scene], ds.bev, state.config.eval)[0]
    out = Path(args.out)
    if out.exists() and not args.force:
        raise StageError("plot-bev", f"output {out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    render_bev_plot(scene.boxes, preds, ds.bev).save(out)
    return f"plot-bev: {len(scene.boxes)} GT and {len(preds)} predicted boxes drawn to {out}"


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bevcon-lab", description="Dense BEV contrastive learning desk lab.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-camera dataset")
    g.add_argument("--config", help="YAML scene generator config")
    g.add_argument("--out", required=True)
    g.add_argument("--n-scenes", type=int, default=500)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    def run_args(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--out", required=True)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train one configuration")
    run_args(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="val", choices=["train", "val", "all"])
    e.add_argument("--out", help="write the metrics record here")
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation lattice and write a comparison table")
    run_args(a)
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--rows", nargs="+")
    a.add_argument("--resume", action="store_true", help="keep finished runs in --out")
    a.set_defaults(fn=cmd_ablate)

    b = sub.add_parser("plot-bev", help="draw GT and predicted boxes on the BEV grid")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--dataset", required=True)
    b.add_argument("--scene-id", type=int, required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--force", action="store_true")
    b.set_defaults(fn=cmd_plot_bev)
    return p


def run_cli(argv: Optional[Sequence[str]] = None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
        summary = args.fn(args)
        result = CommandResult(EXIT_OK, f"OK {summary}")
        print(result.summary)
    except UsageError as e:
        result = CommandResult(EXIT_USAGE, f"USAGE ERROR {e}")
        print(result.summary, file=sys.stderr)
    except StageError as e:
        result = CommandResult(EXIT_RUNTIME, f"FAILED {e}")
        print(result.summary, file=sys.stderr)
    except Exception as e:  # any other runtime failure is reported with its stage
        stage = getattr(locals().get("args"), "command", "cli")
        traceback.print_exc()
        result = CommandResult(EXIT_RUNTIME, f"FAILED {stage}: {type(e).__name__}: {e}")
        print(result.summary, file=sys.stderr)
    return result


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(run_cli(argv).exit_code)


if __name__ == "__main__":
    main()
