import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from axonctl.controller import default_gains
from axonctl.kernels import PhiKernel
from axonctl.model import PhysicalParams, system_matrices

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def param_strategy(delay=True):
    f = lambda lo, hi: st.floats(lo, hi, allow_nan=False, allow_infinity=False,
                                    allow_subnormal=False)
    return st.builds(
        PhysicalParams, D=f(0.2, 5.0), a=f(-1.0, 1.0), g=f(0.0, 1.0), l_c=f(0.1, 2.0),
        r_g=f(0.05, 2.0), r_g_tilde=f(0.0, 0.5), c_inf=f(0.1, 5.0),
        D_e=f(0.0, 2.0) if delay else st.just(0.0), l_s=f(0.2, 5.0))


@pytest.fixture
def params():
    return PhysicalParams()


@pytest.fixture
def mats(params):
    return system_matrices(params)


@pytest.fixture
def gains(mats):
    return default_gains(mats)


@pytest.fixture
def phi(params, mats, gains):
    return PhiKernel(mats, gains.as_array(), params.D, params.a, params.g)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, echoed in the terminal summary
CRITERIA_LINES = []


@pytest.fixture
def report_criterion():
    def _report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA_LINES.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
