import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(4)

from foveastack import optics, optimize


@pytest.fixture(scope="session")
def system():
    return optics.default_system()


@pytest.fixture(scope="session")
def fast_schedule():
    return optimize.OptimizerSchedule(iterations=60, patience=10)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
