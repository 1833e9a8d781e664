import numpy as np
import pytest

from helpers import ADULT_PATH


@pytest.fixture(scope="session")
def adult():
    from fairnn.data import load_adult

    if not ADULT_PATH.exists():
        pytest.fail(f"Adult data not found at {ADULT_PATH}")
    return load_adult(ADULT_PATH)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
