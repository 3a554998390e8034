"""Shared fixtures: the reference plant, its boxes, a seeded dataset and its archive."""

import numpy as np
import pytest

from dd_hankel import make_archive
from dd_plant import ConstraintBoxes, PlantSpec, collect_dataset, generate_excitation
from dd_reach import ReachConfig, build_family

T_INI = 2
N_PRED = 6
N0 = 200
DATA_SEED = 7


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full reference reproduction (set building and closed loops)")


@pytest.fixture(scope="session")
def plant():
    return PlantSpec(A=[[1.0, 1.0], [0.0, 2.0]], B=[[0.0], [1.0]], C=[[1.0, 0.0]], D=[[0.0]])


@pytest.fixture(scope="session")
def boxes():
    return ConstraintBoxes.symmetric(0.5, 4.0)


@pytest.fixture(scope="session")
def dataset(plant, boxes):
    return collect_dataset(plant, np.zeros(2), generate_excitation(boxes, N0, DATA_SEED))


@pytest.fixture(scope="session")
def archive(dataset):
    return make_archive(dataset, T_INI, N_PRED)


@pytest.fixture(scope="session")
def small_family(archive, boxes, plant):
    """Two levels from short origin rollouts; cheap enough for unit tests."""
    cfg = ReachConfig(n_star=2, N_i=8, N=N_PRED, T_ini=T_INI, seed=3)
    return build_family(archive, boxes, cfg, plant=plant)
