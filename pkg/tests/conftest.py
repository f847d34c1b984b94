import numpy as np
import pytest
from hypothesis import settings

from zslmap.matio import SyntheticSpec, generate_synthetic

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticSpec(12, 6, 8, 4, 6, mapping_drift=0.3, noise_sigma=0.2, seed=3))


def random_psd(rng, n, rank=None):
    B = rng.standard_normal((n, rank or n))
    return B @ B.T


def random_pd(rng, n, floor=0.1):
    return random_psd(rng, n) + floor * np.eye(n)


# acceptance reporting: one line per criterion-marked test, in run order
_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, text): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.skipped:
        return
    if report.when == "call" or report.failed:
        label, text = marker.args
        _criteria[label] = (text, "PASS" if report.passed and _criteria.get(label, ("", "PASS"))[1] == "PASS" else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label, (text, status) in _criteria.items():
        terminalreporter.write_line(f"{status}  criterion {label:<3} {text}")
