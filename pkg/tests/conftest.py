import os
from pathlib import Path

import pytest

from henry_mlmc.inputs import RandomInput
from henry_mlmc.solver import SolverConfig, time_march

# Set HENRY_MLMC_TEST_CACHE to keep expensive solves between sessions.
CACHE_ENV = "HENRY_MLMC_TEST_CACHE"


@pytest.fixture(scope="session")
def solve_cache(tmp_path_factory) -> Path:
    """Content-addressed solve cache shared by all tests of one session."""
    path = os.environ.get(CACHE_ENV)
    if path:
        Path(path).mkdir(parents=True, exist_ok=True)
        return Path(path)
    return tmp_path_factory.mktemp("solve_cache")


@pytest.fixture(scope="session")
def level0_trajectory():
    """Full level-0 run for xi = 0 with per-step records."""
    return time_march(0, RandomInput.fixed(), SolverConfig(), max_level=0)


@pytest.fixture(scope="session")
def level1_trajectory():
    """Full level-1 run for xi = 0 with per-step records."""
    return time_march(1, RandomInput.fixed(), SolverConfig(), max_level=1)


# ---------------------------------------------------------------- acceptance summary

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    line = f"{'PASS' if rep.passed else 'FAIL'} criterion {n:2d}: {title}"
    item.config.stash[_RESULTS][n] = line + (f" [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
