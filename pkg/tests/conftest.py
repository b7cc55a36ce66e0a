import numpy as np
import pytest

from clfdr.data import WHEAT_BIOMASS, Covariate

_criteria: dict[int, dict] = {}


@pytest.fixture(scope="session")
def wheat():
    return Covariate(WHEAT_BIOMASS)


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            num, title = m.args
            _criteria.setdefault(num, {"title": title, "outcomes": []})


def pytest_runtest_makereport(item, call):
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _criteria[m.args[0]]["outcomes"].append(call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_criteria):
        c = _criteria[num]
        if not c["outcomes"]:
            status = "NOT RUN"
        else:
            status = "PASS" if all(c["outcomes"]) else "FAIL"
        tr.write_line(f"criterion {num:2d} {status:7s} {c['title']}")
