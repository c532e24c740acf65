import math

import numpy as np
import pytest

from geomgen.chem import Molecule
from geomgen.model import ModelConfig, init_params

from oracles import tetrahedral_hydrogens

SMALL = ModelConfig(n_features=16, n_rbf=40, n_interactions=2, head_widths=(24, 32), n_bins=300)


def water():
    return Molecule([8, 1, 1], [[0.0, 0.0, 0.0], [0.9572, 0.0, 0.0], [-0.2400, 0.9266, 0.0]])


def methane():
    return Molecule([6, 1, 1, 1, 1], np.vstack([np.zeros(3), tetrahedral_hydrogens()]))


def ammonia():
    r, theta = 1.012, math.radians(67.9)
    h = [[r * math.sin(theta) * math.cos(p), r * math.sin(theta) * math.sin(p), r * math.cos(theta)]
         for p in (0.0, 2 * math.pi / 3, 4 * math.pi / 3)]
    return Molecule([7, 1, 1, 1], np.vstack([np.zeros(3), h]))


def overfit_set():
    """Small molecules whose every conditional distance is fixed by symmetry.

    With hydrogens shuffled among themselves, each prediction target is the same
    for every ordering, so the entropy floor is reachable.
    """
    co2 = Molecule([6, 8, 8], [[0, 0, 0], [1.16, 0, 0], [-1.16, 0, 0]])
    hcn = Molecule([1, 6, 7], [[-1.066, 0, 0], [0, 0, 0], [1.156, 0, 0]])
    return [co2, hcn, water(), ammonia(), methane()]


def random_molecule(rng, n=5, charges=None):
    while True:
        pos = rng.uniform(-2.5, 2.5, size=(n, 3))
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1) + np.eye(n) * 10
        if d.min() > 0.9:
            break
    if charges is None:
        charges = rng.choice([1, 6, 7, 8, 9], size=n)
    return Molecule(charges, pos)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_params():
    return init_params(SMALL, np.random.default_rng(5), dtype=np.float32)


@pytest.fixture(scope="session")
def small_params64():
    return init_params(SMALL, np.random.default_rng(5), dtype=np.float64)
