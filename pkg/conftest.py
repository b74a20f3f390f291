"""
Fixtures partagées par les tests FocusReg
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from geom_core import PointCloud, RigidTransform
from scene_sim import PoseBounds, SceneSpec, build_scene, procedural_model

VOXEL = 0.025

collect_ignore = ['examples', 'venv']


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_transform(rng, scale: float = 1.0) -> RigidTransform:
    R = Rotation.random(random_state=rng).as_matrix()
    return RigidTransform(R, rng.uniform(-scale, scale, 3))


@pytest.fixture(scope='session')
def chair():
    return procedural_model('chair', 1024)


@pytest.fixture(scope='session')
def bracket():
    return procedural_model('bracket', 1024)


def room_spec(**overrides) -> SceneSpec:
    """Scène de test réduite au format scan2cad-like."""
    values = dict(
        model='chair',
        model_points=1024,
        instances=4,
        bounds=PoseBounds(box_min=(0.0, 0.0, 0.0), box_max=(6.0, 6.0, 0.0), rotation='yaw', rest_on_floor=True),
        clutter_fraction=0.2,
        clutter_kind='floor',
        seed=3,
    )
    values.update(overrides)
    return SceneSpec(**values)


@pytest.fixture(scope='session')
def room_scene(chair):
    return build_scene(room_spec(), chair, 'scene_0000')


@pytest.fixture
def tetra_cloud():
    return PointCloud(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
