import numpy as np
import pytest

from tefs.corpus import SynthParams, synth_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Twenty synthetic speakers with four seconds of speech each."""
    out = tmp_path_factory.mktemp("corpus")
    params = SynthParams(speaker_seconds=4.0, utterance_min_s=2.0, utterance_max_s=2.0)
    return synth_corpus(20, 7, out, params), out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(code, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    code, title = mark.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        ok = report.passed and _CRITERIA.get(code, (title, True))[1]
        _CRITERIA[code] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for code in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        title, ok = _CRITERIA[code]
        terminalreporter.write_line(f"{code} {'PASS' if ok else 'FAIL'}  {title}")
