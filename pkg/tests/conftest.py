import numpy as np
import pytest

from olatkit import oracle
from olatkit.lightrig import CameraModel


@pytest.fixture(scope="session")
def toy_camera():
    return CameraModel.look_at(eye=(0.0, 0.0, -3.2), target=(0.0, 0.0, 0.0),
                               width=48, height=48, fov_deg=30.0)


@pytest.fixture(scope="session")
def toy_scene():
    return oracle.SphereScene()


@pytest.fixture(scope="session")
def toy_stack(toy_scene, toy_camera):
    """8-light in-memory oracle stack at 48x48."""
    rig = oracle.generate_rig(8)
    return oracle.render_olat_stack(toy_scene, rig, toy_camera)


def random_hdr(rng, height, width, lo=0.0, hi=1.0):
    from olatkit.imagecore import HdrImage

    return HdrImage.from_array(rng.uniform(lo, hi, (height, width, 3)).astype(np.float32))
