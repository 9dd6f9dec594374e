import numpy as np
import pytest
from hypothesis import settings

from tssm_dreamer import kernels

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

BACKENDS = {"numpy": kernels.NUMPY_KERNELS}
if kernels.HAVE_NUMBA:
    BACKENDS["numba"] = kernels.NUMBA_KERNELS


@pytest.fixture(params=sorted(BACKENDS))
def kern(request):
    """Kernel table for each available backend, so both paths get tested."""
    return BACKENDS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """``with criterion(n, title) as note:`` records PASS/FAIL plus any notes."""
    import contextlib
    import time

    @contextlib.contextmanager
    def run(number, title):
        notes = []
        start = time.perf_counter()
        status = "FAIL"
        try:
            yield notes.append
            status = "PASS"
        finally:
            secs = time.perf_counter() - start
            extra = f" ({'; '.join(notes)})" if notes else ""
            line = f"[{status}] criterion {number}: {title} [{secs:.1f} s]{extra}"
            ACCEPTANCE.append(line)
            print(line)

    return run
