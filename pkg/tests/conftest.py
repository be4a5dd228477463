"""Shared fixtures: the reference system from the experiments and random
stable plants for oracle sweeps."""

import numpy as np
import pytest
import scipy.linalg

from muxncs import CostWeights, PlantModel, build_mode_set

DEMO_A = [[1.0, 0.1], [0.0, 1.0]]
DEMO_B = [[0.0], [1.0]]
DEMO_K = [[-0.012, -0.07]]


@pytest.fixture(scope="session")
def demo_plant():
    return PlantModel(A=DEMO_A, B=DEMO_B, C=np.eye(2), K=DEMO_K)


@pytest.fixture(scope="session")
def demo_modes(demo_plant):
    return build_mode_set(demo_plant)


@pytest.fixture(scope="session")
def demo_cost():
    return CostWeights.identity(2, 1)


def random_stable_plant(rng, n_max=4, m_max=2):
    """Random plant with an LQR gain, so spectral_radius(A+BK) < 1 holds.

    Draws (A, B) until the Riccati solve goes through; the returned K is
    -(R + B'PB)^{-1} B'PA, which stabilizes whenever (A, B) is stabilizable.
    """
    while True:
        n = int(rng.integers(1, n_max + 1))
        m = int(rng.integers(1, m_max + 1))
        A = rng.uniform(-1.5, 1.5, (n, n))
        B = rng.uniform(-1.5, 1.5, (n, m))
        try:
            P = scipy.linalg.solve_discrete_are(A, B, np.eye(n), np.eye(m))
            K = -np.linalg.solve(np.eye(m) + B.T @ P @ B, B.T @ P @ A)
            return PlantModel(A=A, B=B, C=np.eye(n), K=K)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            continue
