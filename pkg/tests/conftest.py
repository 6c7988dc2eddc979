import numpy as np
import pytest

from locrank.model import Architecture, init_params

SMALL_ARCH = Architecture(
    in_channels=1, input_size=20, patch_size=12, use_global=False,
    loc_channels=(2, 3, 2), loc_hidden=4, rank_channels=(2, 3), rank_hidden=5,
)


@pytest.fixture
def small_arch():
    return SMALL_ARCH


@pytest.fixture
def small_params():
    return init_params(SMALL_ARCH, np.random.default_rng(0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
