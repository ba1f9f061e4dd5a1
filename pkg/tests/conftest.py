import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_RESULTS = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def record_criterion(number, name, passed=True):
    _ACCEPTANCE_RESULTS.append((number, name, passed))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and report.when == "call":
        number, name = marker.args
        _ACCEPTANCE_RESULTS.append((number, name, report.passed))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, name, passed in sorted(set(_ACCEPTANCE_RESULTS)):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"CRITERION {number} ({name}): {status}")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, name): acceptance criterion test")
    config.addinivalue_line("markers", "slow: long-running end-to-end test")
