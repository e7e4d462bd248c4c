import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40, print_blob=True)
settings.register_profile("thorough", deadline=None, max_examples=500, print_blob=True)
settings.load_profile("default")

# acceptance criterion number -> [title, passed, details]
_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, [title, True, []])
    entry[1] = entry[1] and rep.passed
    entry[2].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[number]
        line = f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)


@pytest.fixture
def detail(record_property):
    """Attach a short measured-value note to the acceptance summary line."""

    def add(text: str):
        record_property("detail", text)

    return add


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
