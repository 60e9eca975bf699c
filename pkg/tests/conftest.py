import numpy as np
import pytest

from bprelab import models, spectral


@pytest.fixture(scope="session")
def scalar_model():
    return models.reference_scalar()


@pytest.fixture(scope="session")
def scalar_sp1(scalar_model):
    return spectral.solve_eigen(1.0, scalar_model)


@pytest.fixture(scope="session")
def p2_model():
    return models.reference_p2()


@pytest.fixture(scope="session")
def p2_calibrated(p2_model):
    return spectral.calibrate(p2_model).model


@pytest.fixture(scope="session")
def p2_sp1(p2_calibrated):
    return spectral.solve_eigen(1.0, p2_calibrated)


@pytest.fixture()
def rng():
    return np.random.default_rng(20250809)
