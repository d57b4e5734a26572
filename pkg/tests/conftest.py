import numpy as np
import pytest

from erkguid.core import build_edm_schedule
from erkguid.fields import build_tree_gmm, single_gaussian


@pytest.fixture(scope="session")
def tree():
    return build_tree_gmm()


@pytest.fixture(scope="session")
def gauss():
    return single_gaussian((0.0, 0.0), 1.0)


@pytest.fixture(scope="session")
def sched32():
    return build_edm_schedule(32)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


# --------------------------------------------------------------------------- acceptance report

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion, then assert it."""

    def record(number: int, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
