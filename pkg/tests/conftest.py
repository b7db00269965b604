import numpy as np
import pytest

from panelq.dgp import generate_panel
from panelq.panel_io import write_panel


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run Monte Carlo acceptance checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_panel(rng):
    """n=6, T=30 location-scale panel with normal errors."""
    return generate_panel(6, 30, 0.5, "normal", rng).panel


@pytest.fixture
def panel_csv(tmp_path, small_panel):
    path = tmp_path / "panel.csv"
    write_panel(small_panel, path)
    return path
