import numpy as np
import pytest

from spde_fpe.spectral import build_eigensystem


@pytest.fixture(scope="session")
def es64():
    return build_eigensystem(64, 256)


@pytest.fixture(scope="session")
def es16():
    return build_eigensystem(16, 64)


def unit(N, k=1, a=1.0):
    x = np.zeros(N)
    x[k - 1] = a
    return x
