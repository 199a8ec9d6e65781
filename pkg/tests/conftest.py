import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).parent
FIXTURES = TESTS / "fixtures"
sys.path.insert(0, str(TESTS))


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def medical_dir() -> Path:
    return FIXTURES / "medical_qa"


@pytest.fixture
def eval_dir() -> Path:
    return FIXTURES / "eval_small"


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict(request):
    """Record ``PASS``/``FAIL`` plus a detail line for one acceptance criterion."""
    number = request.node.get_closest_marker("criterion").args[0]
    details: list[str] = []
    yield details
    failed = getattr(request.node, "rep_call", None) is None or request.node.rep_call.failed
    ACCEPTANCE[number] = f"criterion {number}: {'FAIL' if failed else 'PASS'}  {'; '.join(details)}"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
