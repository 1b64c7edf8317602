import numpy as np
import pytest

from mpgroup.portfolio import synth_dc, synth_term_life


@pytest.fixture(scope="session")
def tl_small():
    return synth_term_life(2000)


@pytest.fixture(scope="session")
def dc_small():
    return synth_dc(2000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
