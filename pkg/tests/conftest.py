import numpy as np
import pytest

from dlo import tensor as T


@pytest.fixture(autouse=True)
def _reset_precision():
    T.set_precision("single")
    yield
    T.set_precision("single")


@pytest.fixture
def double():
    T.set_precision("double")
    yield
    T.set_precision("single")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
