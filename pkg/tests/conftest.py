import numpy as np
import pytest

from u2ucov.config import load_scenario
from u2ucov.montecarlo import simulate

ACCEPTANCE_LINES: list[str] = []

# outcomes of tests carrying a suite marker, keyed by marker then node id
MARKED_OUTCOMES: dict[str, dict[str, bool]] = {"oracle": {}, "invariant": {}}
MARKED_COLLECTED: dict[str, set] = {"oracle": set(), "invariant": set()}


@pytest.fixture(scope="session")
def params():
    return load_scenario()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240607)


_SIM_CACHE: dict = {}


def cached_simulation(overrides: tuple, n_drops: int, seed: int):
    """Session-wide cache so heavy MC runs are shared across test modules."""
    key = (overrides, n_drops, seed)
    if key not in _SIM_CACHE:
        _SIM_CACHE[key] = simulate(load_scenario(overrides=list(overrides)), n_drops, seed)
    return _SIM_CACHE[key]


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so it can summarize the oracle and invariant suites
    items.sort(key=lambda it: it.nodeid.split("::")[0].endswith("test_acceptance.py"))
    for it in items:
        for mark in MARKED_COLLECTED:
            if it.get_closest_marker(mark):
                MARKED_COLLECTED[mark].add(it.nodeid)


def pytest_runtest_logreport(report):
    for mark, ids in MARKED_COLLECTED.items():
        if report.nodeid not in ids:
            continue
        ok = MARKED_OUTCOMES[mark].get(report.nodeid, True)
        if report.when == "call" or report.failed:
            ok = ok and not report.failed
        MARKED_OUTCOMES[mark][report.nodeid] = ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
