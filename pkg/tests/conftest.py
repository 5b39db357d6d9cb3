import numpy as np
import pytest
from loguru import logger

from models.lqr_models import LinearSystem, LQRObjective, ObjectiveSetting, SimulationConfig

RANDOM_A = np.array([[1.4155, -0.0876, 0.7213],
                     [0.8186, 2.7338, -1.2750],
                     [-0.3118, -0.7573, 1.2008]])
RANDOM_B = np.array([[-0.0484, 0.1611, -1.8972],
                     [-1.1350, 1.6600, 0.1003],
                     [0.3905, -0.7851, 0.1055]])
RANDOM_TARGET = np.array([6.0, 8.0, 4.0])
R_TRUE = np.diag([0.4, 0.4, 0.8])

DESK_TARGET = np.array([3000.0, 2000.0])
DESK_INITIALS = [np.array([1430.0, 1457.0]), np.array([2196.0, 1185.0]), np.array([1738.0, 2389.0]),
                 np.array([2500.0, 1500.0])]


@pytest.fixture(autouse=True)
def quiet_logs():
    logger.remove()
    yield


@pytest.fixture
def random_system() -> LinearSystem:
    """Three-state plant with C = I and σ = 0.02."""
    return LinearSystem(A=RANDOM_A, B=RANDOM_B, C=np.eye(3), noise_std=0.02)


@pytest.fixture
def noiseless_random_system(random_system) -> LinearSystem:
    return random_system.with_noise(0.0)


@pytest.fixture
def final_state_objective() -> LQRObjective:
    return LQRObjective.final_state_for(3, R_TRUE)


@pytest.fixture
def classic_objective() -> LQRObjective:
    return LQRObjective(H=np.eye(3), Q=0.2 * np.eye(3), R=R_TRUE, setting=ObjectiveSetting.CLASSIC)


@pytest.fixture
def desk_system() -> LinearSystem:
    """Planar vehicle: A = C = I, B = 0.2 I."""
    return LinearSystem(A=np.eye(2), B=0.2 * np.eye(2), C=np.eye(2), noise_std=0.0)


@pytest.fixture
def desk_objective() -> LQRObjective:
    return LQRObjective(H=5 * np.eye(2), Q=0.1 * np.eye(2), R=0.5 * np.eye(2))


@pytest.fixture
def random_config(noiseless_random_system, classic_objective) -> SimulationConfig:
    """N = 20, full trajectories, l = 15 on the current one."""
    return SimulationConfig(system=noiseless_random_system, objective=classic_objective, horizon=20,
                            target=RANDOM_TARGET, initial=RANDOM_TARGET + np.array([3.0, -2.0, 1.0]),
                            initial_spread=3.0, trajectories=7, current_steps=15)
