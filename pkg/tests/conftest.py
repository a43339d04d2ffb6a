import numpy as np
import pytest

from splatcal.geometry import Camera
from splatcal.renderer import cull_and_project, rasterize
from splatcal.scene import merge_scenes, synth_cameras, synth_scene


@pytest.fixture
def small_scene():
    """300 cloud gaussians, unit extent."""
    return synth_scene(7, 300, "cloud")


@pytest.fixture
def small_camera(small_scene):
    return synth_cameras(3, 4, small_scene, "orbit", width=64, height=64)[0]


@pytest.fixture
def small_target(small_scene, small_camera):
    return rasterize(cull_and_project(small_scene, small_camera), 64, 64)


@pytest.fixture
def wall_cloud_scene():
    """Mixed planar + volumetric fixture exercising depth/fov entanglement."""
    return merge_scenes(synth_scene(21, 300, "textured_wall"), synth_scene(22, 150, "cloud"))


def make_camera(t=(0.0, 0.0, 3.0), q=(1.0, 0.0, 0.0, 0.0), fov=np.pi / 2,
                width=64, height=64):
    return Camera(t=np.asarray(t, dtype=float), q=np.asarray(q, dtype=float),
                  fov_x=fov, fov_y=fov, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height)
