"""Shared fixtures: benchmark plant and helpers for building stable loops."""
import numpy as np
import pytest

from replay_guard.model import DynamicController, PlantModel


THREE_TANK_A = np.array([
    [0.96, 0.0, 0.0],
    [0.04, 0.97, 0.0],
    [-0.04, 0.0, 0.9],
])
THREE_TANK_B = np.array([
    [8.8, -2.3, 0.0, 0.0],
    [0.2, 2.2, 4.9, 0.0],
    [-0.21, -2.2, 1.9, 21.0],
])


@pytest.fixture
def three_tank() -> PlantModel:
    return PlantModel(A=THREE_TANK_A, B=THREE_TANK_B, C=np.eye(3), D=np.eye(3),
                      W=1e-3 * np.eye(3), V=1e-3 * np.eye(3))


def random_stable_pair(n_x=2, n_u=1, n_y=1, n_w=1, seed=0, rho_max=0.95):
    """Random plant + random full-order controller with a stable closed loop.

    Rejection-samples until the augmented state matrix has spectral radius
    below ``rho_max``; deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        A = 0.6 * rng.standard_normal((n_x, n_x))
        B = rng.standard_normal((n_x, n_u))
        C = rng.standard_normal((n_y, n_x))
        D = rng.standard_normal((n_x, n_w))
        A_c = 0.3 * rng.standard_normal((n_x, n_x))
        B_c = 0.3 * rng.standard_normal((n_x, n_y))
        C_c = 0.3 * rng.standard_normal((n_u, n_x))
        Abig = np.block([[A, B @ C_c], [B_c @ C, A_c]])
        if np.abs(np.linalg.eigvals(Abig)).max() < rho_max:
            plant = PlantModel(A=A, B=B, C=C, D=D,
                               W=np.eye(n_w), V=0.5 * np.eye(n_y))
            return plant, DynamicController(A_c=A_c, B_c=B_c, C_c=C_c)
    raise RuntimeError("no stable pair found")
