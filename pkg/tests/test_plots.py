import csv

import pytest

from codaf import plots
from codaf.ablation import ROW_FIELDS
from codaf.train import METRIC_COLUMNS


def metrics_file(tmp_path, n=3):
    run = tmp_path / "myrun"
    run.mkdir()
    path = run / "metrics.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for e in range(1, n + 1):
            w.writerow({k: (e if k == "epoch" else 1.0 / e) for k in METRIC_COLUMNS})
    return path


def ablation_file(tmp_path):
    path = tmp_path / "abl.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        w.writeheader()
        for i, lam in enumerate((0.1, 0.2, 0.3)):
            w.writerow({k: 0 for k in ROW_FIELDS} | {"axis": "lambda-sweep", "label": f"lambda={lam}",
                                                     "lambda": lam, "ap50": 0.5 + 0.1 * i})
        for label, ap in (("codaf", 0.7), ("baseline", 0.6)):
            w.writerow({k: 0 for k in ROW_FIELDS} | {"axis": "baseline", "label": label, "ap50": ap})
    return path


def test_loss_plot(tmp_path):
    out = plots.plot_files([metrics_file(tmp_path)], tmp_path / "png")
    assert [p.name for p in out] == ["myrun_losses.png"]
    assert out[0].stat().st_size > 0


def test_ablation_plots(tmp_path):
    out = plots.plot_files([ablation_file(tmp_path)], tmp_path / "png")
    assert [p.name for p in out] == ["ap_vs_lambda.png", "bars_baseline.png"]


def test_names_are_deterministic(tmp_path):
    a = plots.plot_files([ablation_file(tmp_path)], tmp_path / "one")
    b = plots.plot_files([ablation_file(tmp_path)], tmp_path / "two")
    assert [p.name for p in a] == [p.name for p in b]


def test_missing_file(tmp_path):
    with pytest.raises(plots.PlotError, match="not found"):
        plots.plot_files([tmp_path / "nope.csv"], tmp_path)


def test_empty_file(tmp_path):
    (tmp_path / "e.csv").write_text("epoch,total\n")
    with pytest.raises(plots.PlotError, match="no rows"):
        plots.plot_files([tmp_path / "e.csv"], tmp_path)


def test_lambda_plot_needs_sweep(tmp_path):
    path = ablation_file(tmp_path)
    rows = [r for r in csv.DictReader(open(path)) if r["axis"] != "lambda-sweep"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        w.writeheader()
        w.writerows(rows)
    with pytest.raises(plots.PlotError):
        plots.plot_lambda(path, tmp_path)
