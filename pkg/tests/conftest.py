"""Shared builders for synthetic test data."""

import numpy as np
import pytest

from misalign.geometry import PointCloud, RegisteredPair, RigidTransform


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng: np.random.Generator, scale: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.normal(scale=scale, size=3))


def make_cloud(rng: np.random.Generator, n: int = 200, spread: float = 10.0,
               alpha: float = 0.02) -> PointCloud:
    points = rng.uniform(-spread, spread, size=(n, 3))
    pose = RigidTransform(np.eye(3), rng.uniform(-2, 2, size=3))
    return PointCloud(points, pose, alpha)


def make_pair(seed: int = 0, n: int = 200, misalign: float = 0.0) -> RegisteredPair:
    """A pair whose cloud1 is cloud0 observed from a different frame.

    ``misalign`` shifts the estimated transform away from the ground truth.
    """
    rng = np.random.default_rng(seed)
    cloud0 = make_cloud(rng, n)
    gt = random_transform(rng, scale=2.0)
    # cloud1 holds the same world points expressed in its own frame.
    inv = gt.inverse()
    cloud1 = PointCloud(inv.apply(cloud0.points), inv.compose(cloud0.sensor_pose),
                        cloud0.vertical_angular_resolution)
    if misalign > 0.0:
        offset = RigidTransform(np.eye(3), misalign * rng.normal(size=3))
        est = offset.compose(gt)
    else:
        est = gt
    from misalign.geometry import point_transformation_error

    pair = RegisteredPair(cloud0, cloud1, gt, est, 0.0, 0, "epsilon5")
    eps = point_transformation_error(pair)
    return RegisteredPair(cloud0, cloud1, gt, est, eps, 0, "epsilon5")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
