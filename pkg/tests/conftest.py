import math

import numpy as np
import pytest

from cfgmm.constrained import ModeBounds
from cfgmm.model import MixtureModel
from cfgmm.simulation import generate_mixture_sample

TWO_COMP = MixtureModel.from_arrays([0.5, 8.0], [0.5, 1 / 3], [0.3, 0.7])
THREE_COMP = MixtureModel.from_arrays([0.5, 6.0, 8.0], [2.0, 1 / 3, 1.0], [0.3, 0.5, 0.2])
TWO_BOUNDS = ModeBounds(((-math.inf, 0.0), (0.0, 5.0)))
THREE_BOUNDS = ModeBounds(((-math.inf, 0.0), (0.0, 5.0), (5.0, 15.0)))


def sample(model, n, seed):
    return generate_mixture_sample(model, n, np.random.default_rng(seed))


@pytest.fixture(scope="session")
def two_comp_10k():
    return sample(TWO_COMP, 10_000, 2024)


@pytest.fixture(scope="session")
def three_comp_2k():
    return sample(THREE_COMP, 2_000, 77)


# One line per acceptance criterion, echoed at the end of the run.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
