import numpy as np
import pytest

from inkwell.fdfilter import design_filter
from inkwell.model import NOMINAL_A, NOMINAL_C, NOMINAL_XA, nominal_system
from inkwell.sysid import IdentifiedModel

DT = 1e-7
N = 500
WINDOW = N * DT


@pytest.fixture(scope="session")
def nominal():
    return nominal_system()


@pytest.fixture(scope="session")
def nominal_model():
    return IdentifiedModel(NOMINAL_A, NOMINAL_C, NOMINAL_XA, 0.0, {"t_a": 0.0, "dt": DT, "n": N})


@pytest.fixture(scope="session")
def default_filter(nominal_model):
    return design_filter(nominal_model, dt=DT, window=WINDOW)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
