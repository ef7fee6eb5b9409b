import math

import numpy as np
import pytest

from bevloc import backbone as bb
from bevloc.bev import project_bev
from bevloc.geom import Se2Pose, crop_cloud, voxel_filter
from bevloc.synthetic import make_world, scan_world


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_net():
    spec = bb.small_spec(8)
    return spec, bb.init_weights(spec, 3)


@pytest.fixture(scope="session")
def world():
    return make_world(11, 260.0, 700)


def bev_of(cloud, g=0.4, d=40.0):
    return project_bev(crop_cloud(voxel_filter(cloud, g), d), g, d, 10)


@pytest.fixture(scope="session")
def textured_bev(world):
    return bev_of(scan_world(world, Se2Pose(0.0, 0.0, 0.3), rng=np.random.default_rng(0)))


def random_pose(rng, max_t=10.0):
    r = max_t * math.sqrt(rng.random())
    a = rng.uniform(0, 2 * math.pi)
    return Se2Pose(r * math.cos(a), r * math.sin(a), rng.uniform(-math.pi, math.pi))
