import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from policyaudit.synth import make_ground_truth, sample_cohort  # noqa: E402


@pytest.fixture(scope="session")
def world():
    """Default 20-state ground truth."""
    return make_ground_truth(20, seed=3)


@pytest.fixture(scope="session")
def sampled(world):
    return sample_cohort(world, 2000, seed=5)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
