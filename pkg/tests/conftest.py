import numpy as np
import pytest

from softkill.mean_field import ProblemSpec
from softkill.torus import ScalarField, TorusGrid


def trig(grid, func):
    return ScalarField.from_function(grid, func)


@pytest.fixture
def grid64():
    return TorusGrid(1, 64)


@pytest.fixture
def generic_spec(grid64):
    """V = 1 + cos 2 pi x, g = sin 2 pi x, T = 0.5."""
    V = trig(grid64, lambda x: 1 + np.cos(2 * np.pi * x))
    g = trig(grid64, lambda x: np.sin(2 * np.pi * x))
    return ProblemSpec(V, g, T=0.5, dt=5e-3)


@pytest.fixture
def uniform64(grid64):
    return ScalarField(grid64, np.ones(64))
