import numpy as np
import pytest

from epnkit.group import build_group


@pytest.fixture(scope="session")
def tetra():
    return build_group("tetrahedral")


@pytest.fixture(scope="session")
def octa():
    return build_group("octahedral")


@pytest.fixture(scope="session")
def icosa():
    return build_group("icosahedral")


@pytest.fixture()
def rng():
    return np.random.default_rng(2024)
