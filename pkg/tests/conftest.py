import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from addivc.experiments import closed_loop_model, open_loop_model, pid_controller  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cl_model():
    return closed_loop_model()


@pytest.fixture
def ol_model():
    return open_loop_model()


@pytest.fixture
def pid():
    return pid_controller(0.05)
