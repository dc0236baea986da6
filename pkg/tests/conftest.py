"""Registers the acceptance-criterion marker and prints a per-criterion
PASS/FAIL digest at the end of the run (see test_acceptance.py)."""

import pytest

CRITERIA = {
    1: "LQ solver matches nested grid-search oracle (50 games)",
    2: "iterative solver exact on LQ preset in <= 3 iterations",
    3: "non-LQ Monte Carlo fully converges (full + fast horizon)",
    4: "converged non-LQ solutions admit no follower improvement",
    5: "filter finds the LQ leader over the 1.5-3.5 s window",
    6: "filter finds the non-LQ leader within the first 1.5 s",
    7: "passing: belief shifts from agent 1 to agent 2",
    8: "merging: agent 2 leads after merge entry",
    9: "filter invariants hold exactly",
    10: "cost derivatives and dynamics Jacobians match finite differences",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(n): test backs acceptance criterion n (see conftest.CRITERIA)")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = int(mark.args[0])
    if report.when == "call":
        _outcomes.setdefault(n, []).append(report.outcome == "passed")
    elif report.outcome == "failed":  # setup/teardown error counts against it
        _outcomes.setdefault(n, []).append(False)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        verdict = "PASS" if all(_outcomes[n]) else "FAIL"
        terminalreporter.write_line(
            f"criterion {n:>2}: {CRITERIA.get(n, '?'):<62} {verdict}")
