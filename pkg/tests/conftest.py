import numpy as np
import pytest

from evrecon import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    """Run a test under each kernel backend, restoring the active one after."""
    prev = kernels.active
    kernels.use(request.param)
    yield request.param
    kernels.active = prev


# -- acceptance report ------------------------------------------------------

_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion."""

    def add(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
