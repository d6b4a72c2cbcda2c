"""Shared fixtures plus the acceptance verdict table.

Tests marked `criterion(n, label)` feed a per-criterion PASS/FAIL/SKIP line
printed after the run, so the acceptance status is readable without digging
through individual test ids.
"""

import pytest

from lowrank.data import MNIST_FILES, find_mnist_dir

# worse outcomes overwrite better ones if several tests share a criterion
_SEVERITY = {"passed": 0, "skipped": 1, "failed": 2}


def pytest_configure(config):
    config._criterion_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when != "call" and not (
        report.when == "setup" and report.outcome != "passed"
    ):
        return
    number, label = marker.args
    store = item.config._criterion_results
    previous = store.get(number)
    if previous is None or _SEVERITY[report.outcome] > _SEVERITY[previous[0]]:
        store[number] = (report.outcome, label)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criterion_results", {})
    if not results:
        return
    words = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        outcome, label = results[number]
        terminalreporter.write_line(
            f"criterion {number:>2}: {words.get(outcome, outcome.upper())}  {label}"
        )


@pytest.fixture(scope="session")
def mnist_dir():
    directory = find_mnist_dir()
    if directory is None:
        names = ", ".join(sorted(MNIST_FILES.values()))
        pytest.skip(
            f"image files not found ({names}); point LOWRANK_DATA_DIR at them"
        )
    return directory
