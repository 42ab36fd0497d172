import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mems4.mesh_ops import assemble_operator, build_grid

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid256():
    return build_grid(-1.0, 1.0, 256)


@pytest.fixture(scope="session")
def grid64():
    return build_grid(-1.0, 1.0, 64)


@pytest.fixture(scope="session")
def grid32():
    return build_grid(-1.0, 1.0, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def clamped_bump(grid):
    """(1 - x^2)^2 on (-1, 1): satisfies u = u' = 0 at both ends."""
    return (1.0 - grid.x**2) ** 2


@pytest.fixture(scope="session")
def op_plate256(grid256):
    return assemble_operator(grid256, 0.01, 1.0)
