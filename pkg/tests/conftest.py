import numpy as np
import pytest

from kinlab import _kernels

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one 'criterion k: PASS|FAIL detail' line for the summary, then assert."""
    def record(k, ok, detail):
        request.config.stash[_LINES].append(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return record


@pytest.fixture
def gen():
    return np.random.default_rng(20240611)


@pytest.fixture(params=sorted(_kernels.backends()))
def backend(request):
    return request.param
