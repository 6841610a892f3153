import numpy as np
import pytest

import csmfit


@pytest.fixture(scope="session")
def case1():
    return csmfit.builtin_case("case1")


@pytest.fixture(scope="session")
def case2():
    return csmfit.builtin_case("case2")


@pytest.fixture(scope="session")
def case3():
    return csmfit.builtin_case("case3")


@pytest.fixture(scope="session")
def case4():
    return csmfit.builtin_case("case4")


@pytest.fixture(scope="session")
def case6():
    return csmfit.builtin_case("case6")


@pytest.fixture(scope="session")
def case1_csm(case1):
    return csmfit.synthesize_csm(case1)


@pytest.fixture(scope="session")
def case2_csm(case2):
    return csmfit.synthesize_csm(case2)


@pytest.fixture(scope="session")
def case3_csm(case3):
    return csmfit.synthesize_csm(case3)


@pytest.fixture(scope="session")
def case4_csm(case4):
    return csmfit.synthesize_csm(case4)


@pytest.fixture(scope="session")
def case6_csm(case6):
    return csmfit.synthesize_csm(case6)


def freq_index(scene, f_hz: float) -> int:
    idx = np.flatnonzero(scene.grid.frequencies == f_hz)
    assert idx.size == 1, f"{f_hz} Hz not on the grid"
    return int(idx[0])
