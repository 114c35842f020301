import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import scanbot.robot_core as rc
from scanbot.data import data_path

settings.register_profile(
    "scanbot",
    deadline=None,
    max_examples=50,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("scanbot")


@pytest.fixture(scope="session")
def model() -> rc.RobotModel:
    return rc.RobotModel.reference()


@pytest.fixture(scope="session")
def pendulum_model() -> rc.RobotModel:
    """Test chain that behaves as a single pendulum: joints 1-6 share the
    base z-axis with their COMs on it (no gravity torque, no coupling into a
    planar swing), joint 7 rotates about x and carries a hanging point mass.
    Started at rest with only joint 7 deflected, it swings as a 1-DOF
    pendulum while satisfying the n > 6 model contract.
    """
    n = 7
    fixed = np.tile(np.eye(4), (n, 1, 1))
    axes = np.tile([0.0, 0.0, 1.0], (n, 1))
    axes[6] = [1.0, 0.0, 0.0]
    masses = np.full(n, 0.5)
    masses[6] = 2.0
    coms = np.zeros((n, 3))
    coms[6] = [0.0, 0.0, -0.5]
    inertias = np.tile(0.01 * np.eye(3), (n, 1, 1))
    inertias[6] = 0.02 * np.eye(3)
    return rc.RobotModel(
        name="pendulum_chain",
        fixed_transforms=fixed,
        axes=axes,
        tool_transform=np.eye(4),
        masses=masses,
        coms=coms,
        inertias=inertias,
        joint_limits=np.tile([-10.0, 10.0], (n, 1)),
        torque_limits=np.full(n, 100.0),
        f_max=np.full(6, 100.0),
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


def random_configurations(model, rng, count, sigma_min=0.1):
    """Random joint configurations away from singularities."""
    lo = model.joint_limits[:, 0] + 0.1
    hi = model.joint_limits[:, 1] - 0.1
    out = []
    while len(out) < count:
        q = rng.uniform(lo, hi)
        J = rc.jacobian(model, q)
        if np.linalg.svd(J, compute_uv=False)[-1] > sigma_min:
            out.append(q)
    return out


@pytest.fixture(scope="session")
def scenario_path():
    def _path(name: str):
        return data_path("scenarios", f"{name}.json")
    return _path
