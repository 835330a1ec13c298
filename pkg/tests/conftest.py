import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hpf.data import Dataset  # noqa: E402

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def random_dataset(rng, n_users, n_items, density=0.5, max_count=5):
    mask = rng.random((n_users, n_items)) < density
    users, items = np.nonzero(mask)
    values = rng.integers(1, max_count + 1, len(users))
    return Dataset.from_arrays(n_users, n_items, users, items, values)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
