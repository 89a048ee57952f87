import numpy as np
import pytest

from meshmotion.extensions import BoundaryDisplacement
from meshmotion.geometry import channel_mesh, flap_solid_mesh, unit_square_mesh


def top_moving(m):
    return "moving" if abs(m[1] - 1.0) < 1e-12 else "fixed"


@pytest.fixture(scope="session")
def square6():
    return unit_square_mesh(6, tag_of_midpoint=top_moving)


@pytest.fixture(scope="session")
def square4():
    return unit_square_mesh(4, tag_of_midpoint=top_moving)


@pytest.fixture(scope="session")
def coarse_channel():
    """~350-vertex channel mesh; flap boundary tagged "moving"."""
    return channel_mesh(0.06)


@pytest.fixture(scope="session")
def medium_channel():
    """~1000-vertex channel mesh used by training-style tests."""
    return channel_mesh(0.035)


@pytest.fixture(scope="session")
def solid_mesh():
    return flap_solid_mesh(nx=24, ny=2)


def bump_g(mesh, amplitude, space="P2"):
    """Sine bump on the whole boundary of the unit square."""
    return BoundaryDisplacement.from_callable(
        mesh,
        lambda p: np.column_stack(
            [np.zeros(len(p)), amplitude * np.sin(np.pi * p[:, 0])]
        ),
        space=space,
        moving_tags=None,
    )


def flap_bend_g(mesh, amplitude):
    """Flap-bending family on the channel mesh's moving boundary."""

    def fn(p):
        t = np.clip((p[:, 0] - 0.2489) / (0.6 - 0.2489), 0.0, 1.0)
        return np.column_stack([np.zeros(len(p)), amplitude * t**2])

    return BoundaryDisplacement.from_callable(mesh, fn)
