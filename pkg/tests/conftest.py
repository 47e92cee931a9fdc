import pytest

from egomem import config
from egomem.data import build_dataset


def tiny_cfg(**data):
    cfg = config.resolve("desk")
    cfg["data"].update({"walkthroughs_per_env": 5, "T": 32})
    cfg["data"].update(data)
    cfg["model"].update({"d": 16, "heads": 2, "layers_enc": 1, "layers_dec": 1, "pose_dim": 4})
    cfg["memory"]["K"] = 8
    return cfg


@pytest.fixture(scope="session")
def tiny_cfg_tree():
    return tiny_cfg()


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg_tree):
    return build_dataset([0, 1], tiny_cfg_tree)


_CRITERIA = pytest.StashKey()


@pytest.fixture
def record_criterion(request):
    """Collect one acceptance line per criterion for the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA, {})

    def record(n, ok, detail):
        lines[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
