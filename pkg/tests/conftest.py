import sys

import numpy as np
import pytest
import torch

from nestkd.data import synthetic_tile_dataset
from nestkd.teachers import make_synthetic_teacher

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset():
    return synthetic_tile_dataset(seed=0, classes=4, per_class=6)


@pytest.fixture(scope="session")
def two_teachers():
    return [make_synthetic_teacher(1, 32, depth=2), make_synthetic_teacher(2, 16, grid=8, depth=2)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
