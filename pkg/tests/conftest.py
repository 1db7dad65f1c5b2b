import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bsdelab.catalog import make_driver, make_model
from bsdelab.forward import TimeGrid
from bsdelab.regression import BasisSpec

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def brownian():
    return make_model("brownian-1d")


@pytest.fixture(scope="session")
def quad_driver(brownian):
    return make_driver("pure-quadratic-gamma", brownian)


@pytest.fixture(scope="session")
def zero_driver(brownian):
    return make_driver("zero", brownian)


@pytest.fixture(scope="session")
def basis():
    return BasisSpec()


@pytest.fixture(scope="session")
def unit_grid():
    return TimeGrid.uniform(0.0, 1.0, 50)


def sech2(x):
    return 1.0 / np.cosh(x) ** 2


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
