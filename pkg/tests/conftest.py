import pytest
import torch

from priorsr.core import RunConfig
from priorsr.degrade import DegradationRanges, build_dataset, make_toy_sources


def tiny_config(**kw) -> RunConfig:
    """Smallest geometry the architecture admits: 64px HR, 8x8 latents, narrow layers."""
    base = dict(hr_size=64, unet_channels=(16, 16, 16), image_encoder_channels=(8, 8, 8), ae_channels=(8, 8, 8),
                text_dim=16, batch=2, ae_steps=5, base_steps=6, control_steps=6, n_pairs=3,
                ae_lr=1e-3, base_lr=1e-3, lr=1e-3)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config()
    make_toy_sources(root / "src", 3, cfg.hr_size, 0)
    build_dataset(root / "src", root / "data", 3, DegradationRanges.for_sr_factor(4), 0, cfg.hr_size, 4)
    return root / "data"


@pytest.fixture(scope="session")
def tiny_run(tiny_data, tmp_path_factory):
    """A trained tiny base + control checkpoint pair shared by the slower tests."""
    from priorsr.degrade import load_dataset
    from priorsr.training import latest_checkpoint, train_base, train_control

    run = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config()
    pairs = load_dataset(tiny_data)
    lr_paths = sorted((tiny_data / "lr").glob("*.png"))
    train_base(pairs, cfg, run / "base", lr_paths)
    base = latest_checkpoint(run / "base", "base")
    train_control(pairs, base, cfg, run / "control", lr_paths)
    return {"cfg": cfg, "data": tiny_data, "base": base,
            "control": latest_checkpoint(run / "control", "control")}


_CRITERIA = {}


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None:
        return
    failed = report.failed
    if report.when == "call" or failed:
        prev = _CRITERIA.get(mark[0])
        _CRITERIA[mark[0]] = (mark[1], "FAIL" if failed or (prev and prev[1] == "FAIL") else "PASS")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title}")
