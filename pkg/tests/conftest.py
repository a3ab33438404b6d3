import numpy as np
import pytest

from mfdba.geometry import CameraIntrinsics, PixelGrid, Pose, so3_exp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return CameraIntrinsics(48.0, 48.0, 31.5, 31.5, 64, 64)


@pytest.fixture
def grid(camera):
    return PixelGrid.for_camera(camera, 8)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0, max_angle))


def random_pose(rng, max_angle=np.pi, scale=1.0):
    return Pose(random_rotation(rng, max_angle), rng.normal(scale=scale, size=3))
