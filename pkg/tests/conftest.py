import numpy as np
import pytest
import torch

from dolg.data import make_toy_dataset


@pytest.fixture(scope="session")
def toy_paths(tmp_path_factory):
    return make_toy_dataset(str(tmp_path_factory.mktemp("toy")), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def t64(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        notes = [f"{k}={v}" for k, v in item.user_properties]
        _ACCEPTANCE[number] = (title, "PASS" if report.passed else "FAIL", notes)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, notes = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
        for note in notes:
            terminalreporter.write_line(f"              {note}")
