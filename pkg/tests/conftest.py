import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tabular_imitation.environments import build_recoverability_env  # noqa: E402


@pytest.fixture
def recov1():
    """one_step, T=3, slip=0.1: the two-state recoverable chain."""
    return build_recoverability_env("one_step", T=3, slip=0.1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
