import numpy as np
import pytest

from rangelab.green import GreenOracle, build_green_table


@pytest.fixture(scope="session")
def green3():
    return build_green_table(3, 40)


@pytest.fixture(scope="session")
def green5():
    return build_green_table(5, 12)


@pytest.fixture(scope="session")
def oracle3(green3):
    return GreenOracle(green3)


@pytest.fixture(scope="session")
def oracle5(green5):
    return GreenOracle(green5)


@pytest.fixture(scope="session")
def rng():
    return np.random.Generator(np.random.Philox(key=np.array([3, 14],
                                                             dtype=np.uint64)))
