import numpy as np
import pytest

from ramlab import kernels
from ramlab.rng import RngState


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run a test once per available kernel backend."""
    previous = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


@pytest.fixture
def rs():
    return np.random.default_rng(1234)


@pytest.fixture
def rng():
    return RngState(99)


def pytest_terminal_summary(terminalreporter):
    try:
        from _protocol import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        passed, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
