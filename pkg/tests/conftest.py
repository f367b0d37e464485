import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("sdm", max_examples=60, deadline=None, derandomize=True)
settings.load_profile("sdm")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, from tests named test_acN_*
_criteria: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    name = item.originalname or item.name
    if not name.startswith("test_ac") or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    label = name[len("test_"):].split("_", 1)[0].upper()
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _criteria[label] = ("PASS" if report.passed else "FAIL", detail or name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_criteria, key=lambda s: int(s[2:])):
        status, detail = _criteria[label]
        terminalreporter.write_line(f"{label} {status} {detail}")
