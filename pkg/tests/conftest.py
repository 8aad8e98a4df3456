import numpy as np
import pytest

from racmc.encoders import RecordArrays, SynthConfig, stratified_split, synth_generate
from racmc.model import ModelConfig

_CRITERIA: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    _CRITERIA.setdefault(marker.args[0], []).append("pass" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status = "PASS" if all(s == "pass" for s in _CRITERIA[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} ({len(_CRITERIA[n])} checks)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return ModelConfig(n1=6, n2=5, n_raw=4, dim=8, heads=2)


@pytest.fixture(scope="session")
def separable():
    """400 train / 100 test records from one separable generation."""
    cfg = SynthConfig(n_real=250, n_fake=250, delta=10.0, rho=0.9, noise=1.0, seed=11)
    train, test = stratified_split(synth_generate(cfg), 50, 50)
    return RecordArrays.from_records(train), RecordArrays.from_records(test)

