import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

N_CRITERIA = 10
_verdicts: dict[int, str] = {}
_acceptance_collected = False


def pytest_collection_finish(session):
    global _acceptance_collected
    _acceptance_collected = any(it.get_closest_marker("acceptance") for it in session.items)


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records one pass/fail line for acceptance criterion ``n`` and asserts ``ok``."""

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}"
        _verdicts[n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_collected:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(_verdicts.get(n, f"criterion {n} ERROR: no verdict (errored or not run)"))
