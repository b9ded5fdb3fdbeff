import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fastenet import _accel  # noqa: E402


@pytest.fixture(autouse=True, scope="session")
def strict_mode():
    _accel.set_strict_deterministic(True)
    yield


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
