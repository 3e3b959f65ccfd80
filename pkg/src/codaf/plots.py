"""Static PNG plots from metrics and ablation CSVs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("total", "det", "align_total", "contrast", "sm", "attn")


class PlotError(ValueError):
    pass


def _read(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise PlotError(f"metrics file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PlotError(f"{path} has no rows")
    return rows


def _save(fig, out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out


def plot_losses(metrics: str | Path, out_dir: str | Path) -> Path:
    """Loss components and AP per epoch for one run."""
    rows = _read(metrics)
    if "epoch" not in rows[0]:
        raise PlotError(f"{metrics} is not a metrics log (no epoch column)")
    epochs = [int(r["epoch"]) for r in rows]
    fig, (ax, ax_ap) = plt.subplots(1, 2, figsize=(10, 4))
    for k in LOSS_KEYS:
        if k in rows[0]:
            ax.plot(epochs, [float(r[k]) for r in rows], marker="o", label=k)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    for k in ("ap50", "ap50_95"):
        ax_ap.plot(epochs, [float(r[k]) for r in rows], marker="o", label=k)
    ax_ap.set_xlabel("epoch")
    ax_ap.set_ylabel("AP")
    ax_ap.legend()
    stem = Path(metrics).parent.name or "run"
    return _save(fig, Path(out_dir) / f"{stem}_losses.png")


def _means(rows: Sequence[dict], axis: str) -> list[tuple[str, float, dict]]:
    groups: dict[str, list[dict]] = {}
    for r in rows:
        if r["axis"] == axis:
            groups.setdefault(r["label"], []).append(r)
    return [(label, sum(float(r["ap50"]) for r in rs) / len(rs), rs[0]) for label, rs in groups.items()]


def plot_lambda(ablation_csv: str | Path, out_dir: str | Path) -> Path:
    """AP@.5 against the alignment weight from a lambda-sweep ablation."""
    pts = _means(_read(ablation_csv), "lambda-sweep")
    if not pts:
        raise PlotError(f"{ablation_csv} has no lambda-sweep rows")
    pts.sort(key=lambda p: float(p[2]["lambda"]))
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([float(p[2]["lambda"]) for p in pts], [p[1] for p in pts], marker="o")
    ax.set_xlabel("lambda")
    ax.set_ylabel("AP@.5")
    return _save(fig, Path(out_dir) / "ap_vs_lambda.png")


def plot_bars(ablation_csv: str | Path, out_dir: str | Path) -> list[Path]:
    """One bar chart of mean AP@.5 per non-sweep axis present in the CSV."""
    rows = _read(ablation_csv)
    axes = [a for a in dict.fromkeys(r["axis"] for r in rows) if not a.endswith("-sweep")]
    outs = []
    for axis in axes:
        pts = _means(rows, axis)
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(pts)), 4))
        ax.bar([p[0] for p in pts], [p[1] for p in pts])
        ax.set_ylabel("AP@.5")
        ax.set_title(axis)
        ax.tick_params(axis="x", labelrotation=30)
        outs.append(_save(fig, Path(out_dir) / f"bars_{axis}.png"))
    return outs


def plot_files(paths: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    """Dispatch on CSV type: metrics logs get loss curves, ablation tables get λ curves and bars."""
    outs: list[Path] = []
    for p in paths:
        rows = _read(p)
        if "axis" in rows[0]:
            if any(r["axis"] == "lambda-sweep" for r in rows):
                outs.append(plot_lambda(p, out_dir))
            outs.extend(plot_bars(p, out_dir))
        else:
            outs.append(plot_losses(p, out_dir))
    return outs
