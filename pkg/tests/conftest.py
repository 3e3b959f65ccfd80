import pytest

from codaf.config import RunConfig
from codaf.train import ensure_datasets

SMALL_SCENE = {"image_size": 64, "objects_per_image": (1, 3), "object_size": (10, 20), "max_shift": 3}


def small_config(tmp, **kw) -> RunConfig:
    base = {"scene": SMALL_SCENE, "train_count": 48, "eval_count": 16, "data_dir": str(tmp / "data"),
            "epochs": 2, "batch_size": 16, "output_dir": str(tmp / "run")}
    base.update(kw)
    return RunConfig.model_validate(base)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    cfg = small_config(root)
    ensure_datasets(cfg)
    return root


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report():
    """Record a criterion outcome; printed as one line in the terminal summary."""

    def record(n: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
