"""Shared fixtures; collects one pass/fail line per acceptance criterion."""

import time
from contextlib import contextmanager

import pytest


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def criterion(request):
    """``with criterion(n, title):`` records PASS/FAIL for criterion n."""

    @contextmanager
    def record(number, title):
        start = time.perf_counter()
        notes = []
        status = "FAIL"
        try:
            yield notes
            status = "PASS"
        finally:
            detail = "; ".join(notes)
            line = f"criterion {number:>2}: {status}  {title} ({time.perf_counter() - start:.1f} s)"
            request.config.acceptance_lines[number] = line + (f" -- {detail}" if detail else "")
            print(request.config.acceptance_lines[number])

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
