"""Training and evaluation loops, metrics logging and checkpointing."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import model as M
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .evaluate import evaluate_detections
from .losses import LossBreakdown
from .synthgen import SceneConfig, SyntheticSample, read_dataset, read_manifest, write_dataset

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "det", "contrast", "ssim", "mae", "sm", "sparse", "smooth", "attn",
                  "align_total", "total", "ap50", "ap50_95", "wall_time"]


class NumericalError(RuntimeError):
    """Non-finite loss or a broken loss identity."""


class CompatibilityError(ValueError):
    pass


@dataclass
class Split:
    rgb: torch.Tensor  # uint8 [N, 3, H, W]
    ir: torch.Tensor  # uint8 [N, 1, H, W]
    boxes: list[list[tuple]]  # label frame, per image
    boxes_ir: list[list[tuple]]
    illumination: list[str]

    def __len__(self) -> int:
        return len(self.boxes)

    def images(self, idx) -> tuple[torch.Tensor, torch.Tensor]:
        return self.rgb[idx].float() / 255, self.ir[idx].float() / 255


def load_split(directory: str | Path, label_frame: str = "ir") -> Split:
    samples: list[SyntheticSample] = list(read_dataset(directory))
    rgb = torch.from_numpy(np.stack([np.round(s.rgb * 255) for s in samples]).astype(np.uint8))
    ir = torch.from_numpy(np.stack([np.round(s.ir * 255) for s in samples]).astype(np.uint8))
    boxes = [s.boxes_ir if label_frame == "ir" else s.boxes_rgb for s in samples]
    return Split(rgb, ir, boxes, [s.boxes_ir for s in samples], [s.illumination for s in samples])


def ensure_datasets(cfg: RunConfig) -> None:
    """Generate the train/eval splits unless a matching copy exists."""
    for path, scene, count in ((cfg.train_path, cfg.scene, cfg.train_count),
                               (cfg.eval_path, cfg.eval_scene(), cfg.eval_count)):
        if (path / "manifest.json").exists():
            man = read_manifest(path)
            if man["count"] == count and SceneConfig.model_validate(man["config"]) == scene:
                continue
        log.info("generating %d samples in %s", count, path)
        write_dataset(scene, count, path)


def set_determinism(seed: int, threads: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


class TargetCache:
    """Dense per-sample targets, computed once per split."""

    def __init__(self, split: Split, cfg: M.ModelConfig, image_size: int):
        shapes = [(image_size // s, image_size // s) for s in M.STRIDES]
        per = [M.assign([b], shapes, cfg.num_classes, cfg.size_ranges, cfg.center_radius) for b in split.boxes]
        self.cls = [torch.cat([p.cls[l] for p in per]) for l in range(3)]
        self.reg = [torch.cat([p.reg[l] for p in per]) for l in range(3)]
        self.boxes = [torch.cat([p.boxes[l] for p in per]) for l in range(3)]
        self.pos = [torch.cat([p.pos[l] for p in per]) for l in range(3)]

    def batch(self, idx) -> M.Targets:
        return M.Targets([c[idx] for c in self.cls], [r[idx] for r in self.reg],
                         [b[idx] for b in self.boxes], [p[idx] for p in self.pos])


def predict(model: M.CoDAF, split: Split, batch_size: int = 32) -> list[list[M.Detection]]:
    model.eval()
    preds: list[list[M.Detection]] = []
    with torch.no_grad():
        for start in range(0, len(split), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(split)))
            rgb, ir = split.images(idx)
            out = model(rgb, ir)
            preds.extend(M.postprocess(out.raw, rgb.shape[2:]))
    model.train()
    return preds


def evaluate_model(model: M.CoDAF, split: Split) -> dict:
    """AP against IR-frame ground truth."""
    preds = predict(model, split)
    return evaluate_detections(preds, split.boxes_ir, model.cfg.num_classes)


def build_model(cfg: RunConfig) -> M.CoDAF:
    torch.manual_seed(cfg.seed)
    return M.CoDAF(cfg.model_config_obj())


def _check_step(bd: LossBreakdown, lam: float, step: int) -> None:
    bad = bd.first_nonfinite()
    if bad is not None:
        raise NumericalError(f"non-finite loss component {bad!r} at step {step}")
    try:
        bd.check(lam)
    except ArithmeticError as exc:
        raise NumericalError(f"step {step}: {exc}") from exc


def train(cfg: RunConfig, train_split: Split | None = None, eval_split: Split | None = None,
          save: bool = True) -> dict:
    """Train one configuration. Returns a summary with per-epoch metrics and step losses."""
    set_determinism(cfg.seed, cfg.threads)
    if train_split is None or eval_split is None:
        ensure_datasets(cfg)
        train_split = train_split or load_split(cfg.train_path, cfg.label_frame)
        eval_split = eval_split or load_split(cfg.eval_path, cfg.label_frame)
    model = build_model(cfg)
    opt = torch.optim.AdamW(model.param_groups(cfg.lr, cfg.aux_lr_scale), lr=cfg.lr, weight_decay=cfg.weight_decay)
    total_steps = cfg.epochs * math.ceil(len(train_split) / cfg.batch_size)
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    cache = TargetCache(train_split, model.cfg, cfg.scene.image_size)
    out_dir = cfg.out_path
    if save:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(cfg.dump(), indent=2))
    gen = torch.Generator().manual_seed(cfg.seed)
    rows, step_losses, step_breakdowns = [], [], []
    best_ap = -1.0
    t0 = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(len(train_split), generator=gen)
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            rgb, ir = train_split.images(idx)
            out = model(rgb, ir)
            loss, bd = M.compute_loss(out, cache.batch(idx), cfg.lambda_, cfg.tau, cfg.contrastive)
            _check_step(bd, cfg.lambda_, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            for k, v in bd.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            step_losses.append(bd.total)
            step_breakdowns.append(bd)
            n_batches += 1
            step += 1
        metrics = evaluate_model(model, eval_split)
        row = {k: sums[k] / n_batches for k in sums}
        row.update(epoch=epoch, ap50=metrics["ap50"], ap50_95=metrics["ap50_95"],
                   wall_time=time.perf_counter() - t0)
        rows.append(row)
        log.info("epoch %d total=%.4f det=%.4f align=%.4f AP50=%.4f", epoch, row["total"], row["det"],
                 row["align_total"], row["ap50"])
        if save:
            write_metrics(out_dir / "metrics.csv", rows)
            header = {"config": cfg.dump(), "epoch": epoch,
                      "metrics": {"ap50": metrics["ap50"], "ap50_95": metrics["ap50_95"], "total": row["total"]}}
            save_checkpoint(out_dir / "last.ckpt", model.state_dict(), header)
            if metrics["ap50"] > best_ap:
                save_checkpoint(out_dir / "best.ckpt", model.state_dict(), header)
        best_ap = max(best_ap, metrics["ap50"])
    return {"rows": rows, "step_losses": step_losses, "step_breakdowns": step_breakdowns,
            "model": model, "best_ap50": best_ap,
            "final_ap50": rows[-1]["ap50"], "final_ap50_95": rows[-1]["ap50_95"],
            "param_count": model.param_count()}


def write_metrics(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_COLUMNS})


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def load_model(path: str | Path) -> tuple[M.CoDAF, RunConfig, dict]:
    header, params = load_checkpoint(path)
    cfg = RunConfig.model_validate(header["config"])
    model = M.CoDAF(cfg.model_config_obj())
    expected = set(model.state_dict())
    if expected != set(params):
        missing = sorted(expected ^ set(params))[:5]
        raise CompatibilityError(f"checkpoint arrays do not match the configured model: {missing}")
    model.load_state_dict(params)
    return model, cfg, header


def evaluate_checkpoint(path: str | Path, data_dir: str | Path) -> dict:
    model, cfg, header = load_model(path)
    man = read_manifest(data_dir)
    scene = SceneConfig.model_validate(man["config"])
    if scene.classes != cfg.scene.classes or scene.image_size != cfg.scene.image_size:
        raise CompatibilityError(
            f"dataset ({scene.classes} classes, {scene.image_size}px) does not match checkpoint "
            f"({cfg.scene.classes} classes, {cfg.scene.image_size}px)")
    split = load_split(data_dir, cfg.label_frame)
    report = evaluate_model(model, split)
    report["checkpoint_epoch"] = header.get("epoch")
    report["logged"] = header.get("metrics")
    return report


def is_finite_rows(rows: Sequence[dict]) -> bool:
    return all(math.isfinite(v) for r in rows for v in r.values() if isinstance(v, float))
