import pytest

from codaf import ablation as A
from codaf.config import RunConfig

from conftest import small_config


def test_unknown_axis():
    with pytest.raises(A.AblationError, match="unknown"):
        A.plan(RunConfig(), ["osa", "warp-speed"], [0])


def test_needs_seeds():
    with pytest.raises(A.AblationError):
        A.plan(RunConfig(), ["osa"], [])


def test_lambda_sweep_has_nine_rows():
    jobs = A.plan(RunConfig(), ["lambda-sweep"], [0])
    assert [cfg.lambda_ for _, _, cfg in jobs] == pytest.approx([0.1 * k for k in range(1, 10)])


@pytest.mark.parametrize("axis", sorted(A.AXES))
def test_variants_differ_only_on_axis(axis):
    base = RunConfig()
    _, allowed = A.AXES[axis]
    for _, _, cfg in A.plan(base, [axis], [0, 1]):
        assert A.config_diff(base, cfg) <= allowed | {"seed", "output_dir"}


def test_config_diff_guard(monkeypatch):
    leaky = A.Variant("leaky", {"lambda": 0.5, "tau": 0.2})
    monkeypatch.setitem(A.AXES, "lambda-sweep", ([leaky], {"lambda"}))
    with pytest.raises(A.AblationError, match="tau"):
        A.plan(RunConfig(), ["lambda-sweep"], [0])


def test_output_dirs_distinct():
    jobs = A.plan(RunConfig(), list(A.AXES), [0, 1])
    dirs = [cfg.output_dir for _, _, cfg in jobs]
    assert len(set(dirs)) == len(dirs)


@pytest.mark.parametrize("axis", ["stage-1", "stage-2", "stage-3"])
def test_stage_removal_has_fewer_params(axis):
    from codaf.train import build_model

    full, removed = [build_model(cfg).param_count() for _, _, cfg in A.plan(RunConfig(), [axis], [0])]
    assert removed < full


def test_run_shares_dataset_and_dedups(small_data, tmp_path):
    base = small_config(small_data, epochs=1, output_dir=str(tmp_path / "abl"))
    rows = A.run_ablation(base, ["baseline", "osa"], [0], out_csv=tmp_path / "abl.csv")
    assert [r["label"] for r in rows] == ["codaf", "baseline", "codaf", "w/o OSA"]
    assert len({r["dataset_hash"] for r in rows}) == 1
    # the shared codaf config is trained once and reused
    assert rows[0]["wall_time"] == rows[2]["wall_time"] and rows[0]["ap50"] == rows[2]["ap50"]
    back = A.read_rows(tmp_path / "abl.csv")
    assert len(back) == 4 and list(back[0]) == A.ROW_FIELDS
    summary = A.summarize(back)
    assert [(s["axis"], s["label"]) for s in summary] == [("baseline", "codaf"), ("baseline", "baseline"),
                                                           ("osa", "codaf"), ("osa", "w/o OSA")]
    assert "w/o OSA" in A.format_table(summary)


def test_summarize_means():
    rows = [{"axis": "x", "label": "a", "ap50": v, "ap50_95": 0.0, "params": 5} for v in (0.2, 0.4)]
    (s,) = A.summarize(rows)
    assert s["ap50_mean"] == pytest.approx(0.3) and s["ap50_std"] == pytest.approx(0.1) and s["seeds"] == 2
