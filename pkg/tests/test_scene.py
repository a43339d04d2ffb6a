import math

import numpy as np
import pytest

from splatcal.errors import DomainError
from splatcal.geometry import quat_geodesic_angle, world_to_camera
from splatcal.renderer import cull_and_project, rasterize
from splatcal.scene import (GaussianScene, compute_extent, merge_scenes, perturb_camera,
                            synth_cameras, synth_scene)


class TestSynthScene:
    def test_single_grid_gaussian(self):
        scene = synth_scene(1, 1, "grid")
        np.testing.assert_allclose(scene.positions[0], np.zeros(3))
        assert scene.opacities[0] == 1.0

    @pytest.mark.parametrize("layout", ["cloud", "grid", "textured_wall"])
    def test_deterministic(self, layout):
        a = synth_scene(11, 200, layout)
        b = synth_scene(11, 200, layout)
        for field in ("positions", "scales", "rotations", "opacities", "colors"):
            assert np.array_equal(getattr(a, field), getattr(b, field))

    def test_render_variance_guard(self):
        # A degenerate fixture would make pose unobservable.
        scene = synth_scene(7, 500, "cloud")
        cam = synth_cameras(0, 1, scene, "orbit", width=64, height=64)[0]
        image = rasterize(cull_and_project(scene, cam), 64, 64)
        assert np.all(image.var(axis=(0, 1)) > 0.005)

    def test_rejects_empty(self):
        with pytest.raises(DomainError):
            synth_scene(0, 0, "cloud")

    def test_rejects_unknown_layout(self):
        with pytest.raises(DomainError):
            synth_scene(0, 10, "spiral")

    @pytest.mark.parametrize("layout", ["cloud", "grid", "textured_wall"])
    def test_field_invariants(self, layout):
        scene = synth_scene(13, 333, layout)
        assert np.all(scene.opacities >= 0.3) and np.all(scene.opacities <= 1.0)
        assert np.all(scene.scales > 0)
        ratios = scene.scales.max(axis=1) / scene.scales.min(axis=1)
        assert np.all(ratios <= 10.0)
        assert np.all(scene.colors >= 0) and np.all(scene.colors <= 1)
        assert np.all(np.linalg.norm(scene.positions, axis=1) <= 1.0 + 1e-9)

    def test_extent_matches_definition(self):
        scene = synth_scene(5, 100, "cloud")
        centroid = scene.positions.mean(axis=0)
        r = np.max(np.linalg.norm(scene.positions - centroid, axis=1))
        assert scene.extent == pytest.approx(r, abs=1e-6)

    def test_degenerate_extent_floors_at_one(self):
        assert compute_extent(np.zeros((3, 3))) == 1.0

    def test_merge_recomputes_extent(self):
        a = synth_scene(1, 50, "cloud")
        b = synth_scene(2, 50, "textured_wall")
        m = merge_scenes(a, b)
        assert len(m) == 100
        centroid = m.positions.mean(axis=0)
        assert m.extent == pytest.approx(
            np.max(np.linalg.norm(m.positions - centroid, axis=1)))


class TestSynthCameras:
    def test_single_camera_looks_at_centroid(self):
        scene = synth_scene(3, 100, "cloud")
        cam = synth_cameras(9, 1, scene, "orbit")[0]
        centroid = scene.positions.mean(axis=0)
        p_cam = world_to_camera(centroid, cam)
        angle = math.atan2(math.hypot(p_cam[0], p_cam[1]), p_cam[2])
        assert angle < 1e-6

    def test_orbit_spacing_is_uniform(self):
        scene = synth_scene(3, 100, "cloud")
        cams = synth_cameras(9, 8, scene, "orbit")
        centroid = scene.positions.mean(axis=0)
        centers = [-(c.rotation().T @ c.t) - centroid for c in cams]
        for i in range(8):
            a, b = centers[i], centers[(i + 1) % 8]
            cosang = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
            assert math.acos(np.clip(cosang, -1, 1)) == pytest.approx(math.pi / 4, abs=1e-6)

    @pytest.mark.parametrize("rig", ["orbit", "arc"])
    def test_frustum_coverage(self, rig):
        scene = synth_scene(17, 400, "cloud")
        for cam in synth_cameras(2, 6, scene, rig, width=96, height=96):
            p_cam = world_to_camera(scene.positions, cam)
            fx, fy = cam.focal()
            z = p_cam[:, 2]
            u = fx * p_cam[:, 0] / z + cam.cx
            v = fy * p_cam[:, 1] / z + cam.cy
            visible = (z > 0.01) & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
            assert visible.mean() >= 0.9

    def test_distance_in_bounds(self):
        scene = synth_scene(3, 100, "cloud")
        for cam in synth_cameras(4, 5, scene, "arc"):
            center = -(cam.rotation().T @ cam.t)
            d = np.linalg.norm(center - scene.positions.mean(axis=0))
            assert 2.0 * scene.extent <= d <= 4.0 * scene.extent

    def test_deterministic(self):
        scene = synth_scene(3, 100, "cloud")
        a = synth_cameras(9, 4, scene, "arc")
        b = synth_cameras(9, 4, scene, "arc")
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.t, cb.t) and np.array_equal(ca.q, cb.q)
            assert ca.fov_x == cb.fov_x


class TestPerturbCamera:
    def test_zero_deltas_is_identity(self, small_scene):
        cam = synth_cameras(1, 1, small_scene)[0]
        same = perturb_camera(cam, 123)
        assert np.array_equal(same.t, cam.t)
        assert np.array_equal(same.q, cam.q)
        assert same.fov_x == cam.fov_x and same.fov_y == cam.fov_y

    def test_translation_only(self, small_scene):
        cam = synth_cameras(1, 1, small_scene)[0]
        new = perturb_camera(cam, 5, dt=0.01)
        assert 0 < np.linalg.norm(new.t - cam.t) <= 0.01
        assert quat_geodesic_angle(new.q, cam.q) == 0.0
        assert new.fov_x == cam.fov_x

    def test_uniform_ball_statistics(self, small_scene):
        # mean radius of a uniform ball draw is 3/4 of the max radius
        cam = synth_cameras(1, 1, small_scene)[0]
        dt = 0.02
        radii = np.array([np.linalg.norm(perturb_camera(cam, s, dt=dt).t - cam.t)
                          for s in range(10000)])
        assert radii.max() <= dt + 1e-15
        assert radii.mean() == pytest.approx(0.75 * dt, rel=0.02)

    def test_rotation_bounded(self, small_scene):
        cam = synth_cameras(1, 1, small_scene)[0]
        dtheta = math.radians(1.0)
        angles = [quat_geodesic_angle(perturb_camera(cam, s, dtheta=dtheta).q, cam.q)
                  for s in range(500)]
        assert max(angles) <= dtheta + 1e-12

    def test_fov_factor_applied_to_both_axes(self, small_scene):
        cam = synth_cameras(1, 1, small_scene)[0]
        new = perturb_camera(cam, 17, dfov=0.05)
        kx = new.fov_x / cam.fov_x
        ky = new.fov_y / cam.fov_y
        assert kx == pytest.approx(ky, abs=1e-15)
        assert abs(kx - 1.0) <= 0.05

    def test_rejects_negative_deltas(self, small_scene):
        cam = synth_cameras(1, 1, small_scene)[0]
        with pytest.raises(DomainError):
            perturb_camera(cam, 0, dt=-0.1)


class TestGaussianScene:
    def test_roundtrip_through_gaussian_objects(self):
        scene = synth_scene(2, 10, "cloud")
        rebuilt = GaussianScene.from_gaussians([scene.gaussian(i) for i in range(10)])
        np.testing.assert_allclose(rebuilt.positions, scene.positions)
        np.testing.assert_allclose(rebuilt.opacities, scene.opacities)

    def test_mismatched_arrays_rejected(self):
        with pytest.raises(DomainError):
            GaussianScene(np.zeros((3, 3)), np.ones((2, 3)), np.tile([1, 0, 0, 0], (3, 1)),
                          np.ones(3), np.zeros((3, 3)))
