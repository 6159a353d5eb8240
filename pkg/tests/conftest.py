import math

import numpy as np
import pytest
from hypothesis import settings

from cito.planar_dynamics import ArmModel, BoxModel, Trajectory, WorldState

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# relative joint angles (rad) with the elbow bent up, end-effector in front of the default box
Q_READY = np.array([1.2, -2.0, 0.8])
BOX_POSE = np.array([0.45, 0.20, 0.0])
FAR_BOX = np.array([10.0, 10.0, 0.0])


@pytest.fixture
def arm():
    return ArmModel()


@pytest.fixture
def box():
    return BoxModel()


@pytest.fixture
def rest_state():
    return WorldState.at_rest(Q_READY, FAR_BOX)


def wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def synthetic(ee_speed, gamma, N=20, t_c=0.05):
    """Trajectory with prescribed end-effector velocity (along x) and force records."""
    z3 = np.zeros((N, 3))
    return Trajectory(
        initial=WorldState.at_rest(np.zeros(3), BOX_POSE),
        t=t_c * np.arange(1, N + 1),
        q=z3,
        qdot=z3,
        box_pose=np.tile(BOX_POSE, (N, 1)),
        box_vel=z3,
        phi=np.full(N, 0.1),
        gamma=np.broadcast_to(np.asarray(gamma, dtype=float), (N,)).copy(),
        f_actual_n=np.zeros(N),
        f_actual=np.zeros((N, 2)),
        ee_vel=np.column_stack([np.broadcast_to(np.asarray(ee_speed, dtype=float), (N,)), np.zeros(N)]),
        u=z3,
    )


# acceptance verdicts, printed together at the end of the run
CRITERIA = []


def record_criterion(name, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
