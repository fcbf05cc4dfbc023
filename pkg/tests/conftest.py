import os
from pathlib import Path

import numpy as np
import pytest

from fedbayes import data

REPO_DATA = Path(__file__).resolve().parents[1] / "data"


def _adult_dir():
    for cand in (os.environ.get("FEDBAYES_DATA_DIR"), REPO_DATA):
        if not cand:
            continue
        try:
            return data.find_adult_dir(cand)
        except FileNotFoundError:
            continue
    return None


@pytest.fixture(scope="session")
def adult_dir():
    path = _adult_dir()
    if path is None:
        pytest.skip("UCI Adult files not available")
    return path


@pytest.fixture(scope="session")
def adult_split(adult_dir):
    return data.load_adult_dir(adult_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
