import numpy as np
import pytest

from queryrec.synthetic import SyntheticConfig, generate_synthetic

SMALL = SyntheticConfig(n_users=60, n_items=40, n_queries=12, n_categories=4, sessions=6)


@pytest.fixture(scope="session")
def small_bundle():
    return generate_synthetic(SMALL, seed=0)


@pytest.fixture
def rng64():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from _acceptance import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
