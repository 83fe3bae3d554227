import numpy as np
import pytest

from fastkv import init_model, tiny_config

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def tiny():
    return init_model(tiny_config(4), seed=7)


@pytest.fixture(scope="session")
def tiny8():
    return init_model(tiny_config(8), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
