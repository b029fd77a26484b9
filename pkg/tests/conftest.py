import numpy as np
import pytest

from nnabs.benchmarks import make_benchmark
from nnabs.grid import GridAbstraction, GridSpec
from nnabs.specification import SpecKind, Specification
from nnabs.stochastic import Box, StochasticSystem


def shift_system(noise=0.0, lower=0.0, upper=10.0):
    """1-d ``x' = x + u`` on ``[lower, upper]`` with ``u`` in ``[-1, 1]``."""
    return StochasticSystem(Box([lower], [upper]), Box([-1], [1]),
                            lambda x, u: x + u, np.array([noise]))


def plane_system(noise=0.0):
    """2-d ``x' = x + u`` on ``[0, 4]^2`` with ``u`` in ``[-1, 1]^2``."""
    return StochasticSystem(Box([0, 0], [4, 4]), Box([-1, -1], [1, 1]),
                            lambda x, u: x + u, np.full(2, noise))


def make_plane_reach():
    """Noisy plane with a corner goal and one obstacle cell block; 8x8 cells, 25 inputs."""
    sys = plane_system(0.05)
    spec = Specification(SpecKind.REACH_AVOID, 5, goal=Box([3, 3], [4, 4]),
                         obstacle=Box([1, 2], [2, 3]))
    grid = GridAbstraction(sys.state_box, sys.input_box, GridSpec((0.5, 0.5), (0.5, 0.5)), spec)
    return sys, spec, grid


@pytest.fixture
def plane_reach():
    return make_plane_reach()


@pytest.fixture(scope="session")
def robot():
    return make_benchmark("Robot2D")


@pytest.fixture(scope="session")
def robot_grid(robot):
    return GridAbstraction(robot.system.state_box, robot.system.input_box, robot.grid, robot.spec)
