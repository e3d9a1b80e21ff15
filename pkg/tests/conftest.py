import numpy as np
import pytest

from holstein_lab.hamiltonian import ModelParams, sample_disorder
from holstein_lab.lattice import LatticeRegion
from holstein_lab.states import BasisEnumeration, TruncationPolicy


@pytest.fixture(scope="session")
def chain8_k2():
    return BasisEnumeration(LatticeRegion.chain(8), TruncationPolicy(2))


@pytest.fixture(scope="session")
def chain6_k1():
    return BasisEnumeration(LatticeRegion.chain(6), TruncationPolicy(1))


@pytest.fixture
def params():
    return ModelParams(1, 0.05, 1.0, 1.0, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def disorder_for(enum, params, seed=0, index=0):
    return sample_disorder(enum.region, params, seed, index)


# --- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    n = mark.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.failed or report.when == "call":
        _CRITERIA[n] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"{status} criterion {n:2d}: {detail}")
