from __future__ import annotations

import numpy as np
import pytest

from ocdrl.core import Dataset

_CRITERIA: dict[int, tuple[str, str]] = {}


def make_dataset(rng: np.random.Generator, n: int, J: int, p: int, floor: float = 0.1) -> Dataset:
    """Random logged data with a full propensity model and rewards in [0, 1]."""
    X = rng.uniform(size=(n, p))
    probs = rng.dirichlet(np.ones(J), size=n) * (1 - floor) + floor / J
    d = np.array([rng.choice(J, p=row) for row in probs]) + 1
    y = rng.uniform(size=n)
    return Dataset(X, d, y, probs[np.arange(n), d - 1], J, 1.0, float(probs.min()) * 0.999, probs)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.addinivalue_line("markers", "slow: long-running test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA[number] = (title, "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
