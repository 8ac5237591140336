import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vibilevel.model import Box, InnerMap, InstanceSpec, OuterObjective
from vibilevel.problems import affine_instance, tracking_objective

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def linear_instance(dim=2, b=4.0, x_lo=0.0, x_hi=2.0):
    """``F(y, x) = 2y - x`` on ``[0, 1]^dim``; ``y*(x) = x/2`` while inside."""
    return affine_instance(2 * np.eye(dim), -np.eye(dim), np.zeros(dim), Box.cube(dim),
                           Box.cube(dim, x_lo, x_hi), tracking_objective(np.full(dim, 0.5)),
                           a=1.0, b=b, name="linear")


def constant_map_instance(value=1.0):
    """1-d instance with ``F`` constant, for hand-evaluated gap values."""
    inner = InnerMap(1, 1, eval=lambda y, x: np.array([value]), mu=0.0,
                     jac_y=lambda y, x: np.zeros((1, 1)), jac_x=lambda y, x: np.zeros((1, 1)))
    outer = OuterObjective(lambda y, x: 0.0, lambda y, x: np.zeros(1), lambda y, x: np.zeros(1))
    return InstanceSpec(inner, outer, Box.cube(1), Box.cube(1))


@pytest.fixture
def linear2():
    return linear_instance()
