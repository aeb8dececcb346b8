import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from bandshare.model import SystemConfig  # noqa: E402


@pytest.fixture
def cfg():
    return SystemConfig()


@pytest.fixture
def configs_dir():
    return os.path.join(os.path.dirname(__file__), os.pardir, "configs")


ACCEPTANCE = []


@pytest.fixture
def report():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def _report(name, clauses):
        ok = all(passed for _, passed in clauses)
        detail = "; ".join(f"{text} [{'ok' if passed else 'FAIL'}]" for text, passed in clauses)
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
