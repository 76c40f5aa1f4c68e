import pytest
import torch

from ilr import numcore as nc


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    nc.set_threads(1)
    yield


@pytest.fixture
def f64():
    return torch.float64


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
