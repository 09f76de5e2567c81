import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def acceptance():
    return ACCEPTANCE


def _timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def midpoint_scenario():
    from fibrenet.scenarios import load_preset

    return load_preset("paper-50km")


@pytest.fixture(scope="session")
def fast_run(midpoint_scenario):
    """100 s fast-engine run of the midpoint preset and its wall time."""
    from fibrenet.scenarios import simulate

    return _timed(simulate, midpoint_scenario, "fast")


@pytest.fixture(scope="session")
def slow_run(midpoint_scenario):
    """1e5 s slow-engine run of the midpoint preset and its wall time."""
    from fibrenet.scenarios import simulate

    return _timed(simulate, midpoint_scenario, "slow")


@pytest.fixture(scope="session")
def midpoint_result(midpoint_scenario, fast_run, slow_run):
    from fibrenet.scenarios import run_midpoint

    runs = {"fast": fast_run[0], "slow": slow_run[0]}
    result, seconds = _timed(run_midpoint, midpoint_scenario, runs)
    # analysis time counts toward the slow-engine budget
    return result, slow_run[1] + seconds


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
