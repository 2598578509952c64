import numpy as np
import pytest

from batsort import electrode


@pytest.fixture(scope="session")
def pe_model():
    return electrode.reference_pe_model()


@pytest.fixture(scope="session")
def ne_model():
    return electrode.reference_ne_model()


@pytest.fixture(scope="session")
def fresh_eaps():
    return electrode.fresh_cell_eaps()


@pytest.fixture(scope="session")
def evaluator(pe_model, ne_model):
    return electrode.get_evaluator(pe_model, ne_model)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260816)
