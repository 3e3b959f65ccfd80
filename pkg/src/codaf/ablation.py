"""Ablation runner: trains config variants on one shared dataset and tabulates AP."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import RunConfig
from .synthgen import dataset_hash
from .train import ensure_datasets, load_split, train

log = logging.getLogger(__name__)

LAMBDAS = tuple(round(0.1 * k, 1) for k in range(1, 10))
TAUS = (0.03, 0.05, 0.07, 0.1, 0.2)


@dataclass(frozen=True)
class Variant:
    label: str
    overrides: dict

    def apply(self, base: RunConfig) -> RunConfig:
        data = base.dump()
        data.update(self.overrides)
        return RunConfig.model_validate(data)


def _modes(*pairs: tuple[str, str]) -> list[Variant]:
    return [Variant(label, {"mode": mode}) for label, mode in pairs]


# axis -> (variants, config keys the axis may change)
AXES: dict[str, tuple[list[Variant], set[str]]] = {
    "baseline": (_modes(("codaf", "codaf"), ("baseline", "baseline")), {"mode"}),
    "osa": (_modes(("codaf", "codaf"), ("w/o OSA", "no-osa")), {"mode"}),
    "magn": (_modes(("codaf", "codaf"), ("w/o MAGN", "no-magn")), {"mode"}),
    "dacm": (_modes(("codaf", "codaf"), ("w/o DACM", "no-dacm")), {"mode"}),
    "stage-1": (_modes(("codaf", "codaf"), ("w/o stage 1", "no-stage-1")), {"mode"}),
    "stage-2": (_modes(("codaf", "codaf"), ("w/o stage 2", "no-stage-2")), {"mode"}),
    "stage-3": (_modes(("codaf", "codaf"), ("w/o stage 3", "no-stage-3")), {"mode"}),
    "components": (_modes(("baseline", "baseline"), ("baseline+O", "baseline+osa"), ("baseline+M", "baseline+magn"),
                          ("baseline+DA", "baseline+dacm"), ("baseline+D", "baseline+dafm"), ("codaf", "codaf")),
                   {"mode"}),
    "lambda-sweep": ([Variant(f"lambda={v}", {"lambda": v}) for v in LAMBDAS], {"lambda"}),
    "tau-sweep": ([Variant(f"tau={v}", {"tau": v}) for v in TAUS], {"tau"}),
    "attention-source": ([Variant("M from IR", {"attention_source": "ir"}),
                          Variant("M from visible", {"attention_source": "visible"})], {"attention_source"}),
    "contrastive": ([Variant("with CL", {"contrastive": True}), Variant("w/o CL", {"contrastive": False})],
                    {"contrastive"}),
}

ROW_FIELDS = ["axis", "label", "seed", "mode", "lambda", "tau", "attention_source", "contrastive", "params",
              "ap50", "ap50_95", "best_ap50", "final_total", "epochs", "wall_time", "dataset_hash"]


class AblationError(ValueError):
    pass


def config_diff(a: RunConfig, b: RunConfig) -> set[str]:
    da, db = a.dump(), b.dump()
    return {k for k in da if da[k] != db[k]}


def plan(base: RunConfig, axes: Sequence[str], seeds: Sequence[int]) -> list[tuple[str, Variant, RunConfig]]:
    """Expand axes into concrete configs, checking each differs from ``base`` only on its axis."""
    unknown = [a for a in axes if a not in AXES]
    if unknown:
        raise AblationError(f"unknown ablation axis {unknown}; choose from {sorted(AXES)}")
    if not seeds:
        raise AblationError("at least one seed is required")
    jobs = []
    for axis in axes:
        variants, allowed = AXES[axis]
        for variant in variants:
            for seed in seeds:
                cfg = variant.apply(base).model_copy(update={"seed": seed})
                slug = variant.label.replace(" ", "_").replace("/", "").replace("=", "")
                cfg = cfg.model_copy(update={"output_dir": str(Path(base.output_dir) / axis / f"{slug}-s{seed}")})
                extra = config_diff(base, cfg) - allowed - {"seed", "output_dir"}
                if extra:
                    raise AblationError(f"variant {variant.label!r} of axis {axis!r} also changes {sorted(extra)}")
                jobs.append((axis, variant, cfg))
    return jobs


def run_ablation(base: RunConfig, axes: Sequence[str], seeds: Sequence[int] = (0,),
                 out_csv: str | Path | None = None, save_runs: bool = False) -> list[dict]:
    """Train every variant on the same generated dataset and return one row per (variant, seed).

    Identical configs requested by several axes are trained once.
    """
    jobs = plan(base, axes, seeds)
    ensure_datasets(base)
    data_hash = _split_hash(base)
    train_split = load_split(base.train_path, base.label_frame)
    eval_split = load_split(base.eval_path, base.label_frame)
    done: dict[str, dict] = {}
    rows = []
    for axis, variant, cfg in jobs:
        key = _run_key(cfg)
        if key not in done:
            log.info("ablation %s / %s (seed %d)", axis, variant.label, cfg.seed)
            t0 = time.perf_counter()
            res = train(cfg, train_split, eval_split, save=save_runs)
            done[key] = {
                "params": res["param_count"], "ap50": res["final_ap50"], "ap50_95": res["final_ap50_95"],
                "best_ap50": res["best_ap50"], "final_total": res["rows"][-1]["total"],
                "wall_time": time.perf_counter() - t0,
            }
        rows.append({"axis": axis, "label": variant.label, "seed": cfg.seed, "mode": cfg.mode,
                     "lambda": cfg.lambda_, "tau": cfg.tau, "attention_source": cfg.attention_source,
                     "contrastive": cfg.contrastive, "epochs": cfg.epochs, "dataset_hash": data_hash,
                     **done[key]})
    if out_csv is not None:
        write_rows(out_csv, rows)
    return rows


def _run_key(cfg: RunConfig) -> str:
    d = cfg.dump()
    d.pop("output_dir")
    return repr(sorted(d.items()))


def _split_hash(cfg: RunConfig) -> str:
    return dataset_hash(cfg.train_path)[:16] + dataset_hash(cfg.eval_path)[:16]


def write_rows(path: str | Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in ROW_FIELDS})


def read_rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Mean and spread of AP over seeds, per (axis, label), in first-seen order."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["axis"], r["label"]), []).append(r)
    out = []
    for (axis, label), rs in groups.items():
        ap = np.array([float(r["ap50"]) for r in rs])
        ap95 = np.array([float(r["ap50_95"]) for r in rs])
        out.append({"axis": axis, "label": label, "seeds": len(rs), "ap50_mean": float(ap.mean()),
                    "ap50_std": float(ap.std()), "ap50_95_mean": float(ap95.mean()),
                    "params": int(float(rs[0]["params"]))})
    return out


def format_table(summary: Sequence[dict]) -> str:
    lines = [f"{'axis':<17} {'variant':<16} {'seeds':>5} {'AP@.5':>14} {'AP@.5:.95':>10} {'params':>10}"]
    for s in summary:
        lines.append(f"{s['axis']:<17} {s['label']:<16} {s['seeds']:>5} "
                     f"{s['ap50_mean']:>7.4f}±{s['ap50_std']:.4f} {s['ap50_95_mean']:>10.4f} {s['params']:>10}")
    return "\n".join(lines)
