import os
import sys

import numba
import pytest

numba.config.THREADING_LAYER = "omp"
sys.path.insert(0, os.path.dirname(__file__))

CRITERIA = {}


@pytest.fixture
def record_criterion():
    """Tests call record(n, ok, detail); the summary prints one line each."""

    def record(n, ok, detail=""):
        CRITERIA[n] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
