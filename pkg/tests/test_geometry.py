"""Cameras, rays, projection, bilinear sampling, pose differences."""

import numpy as np
import pytest

from attnfield import geometry as G


def _cam(t=(0.0, 0.0, 0.0), R=None, w=8, h=8, focal=8.0, near=0.5, far=4.0):
    R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64)
    return G.Camera(fx=focal, fy=focal, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                    R=R, t=np.asarray(t, dtype=np.float64), width=w, height=h,
                    t_near=near, t_far=far)


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


class TestCamera:
    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(ValueError):
            _cam(R=np.eye(3) * 2.0)

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            _cam(R=np.diag([1.0, 1.0, -1.0]))

    def test_rejects_bad_depth_range(self):
        with pytest.raises(ValueError):
            _cam(near=2.0, far=1.0)
        with pytest.raises(ValueError):
            _cam(near=-1.0)

    def test_accepts_arbitrary_rotation(self):
        cam = _cam(R=_rot_x(0.7))
        np.testing.assert_allclose(cam.R @ cam.R.T, np.eye(3), atol=1e-12)


class TestRays:
    def test_principal_point_looks_forward(self):
        cam = _cam()
        ray = G.make_ray(cam, cam.cx, cam.cy)
        np.testing.assert_allclose(ray.direction, [0.0, 0.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(ray.origin, cam.t)

    def test_directions_unit_norm(self):
        cam = _cam(t=(1.0, -2.0, 0.5), R=_rot_x(0.3))
        px, py = np.meshgrid(np.arange(8.0), np.arange(8.0))
        origins, dirs = G.make_rays_grid(cam, px.ravel(), py.ravel())
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-12)
        assert dirs.shape == (64, 3) and origins.shape == (64, 3)

    def test_grid_matches_single_rays(self):
        cam = _cam(t=(0.2, 0.1, -1.0), R=_rot_x(-0.4), w=4, h=3)
        px = np.array([0.0, 1.0, 3.0, 2.5])
        py = np.array([0.0, 2.0, 1.0, 0.5])
        _, dirs = G.make_rays_grid(cam, px, py)
        for k in range(4):
            one = G.make_ray(cam, px[k], py[k])
            np.testing.assert_allclose(dirs[k], one.direction, atol=1e-12)

    def test_top_left_origin(self):
        # pixel (0, 0) is up-left of the principal point: negative x and
        # negative y in the camera frame (image y grows downward).
        ray = G.make_ray(_cam(), 0.0, 0.0)
        assert ray.direction[0] < 0 and ray.direction[1] < 0

    def test_ray_rejects_unnormalized_direction(self):
        with pytest.raises(ValueError):
            G.Ray(np.zeros(3), np.array([0.0, 0.0, 2.0]))


class TestProjection:
    def test_round_trip_through_pixel(self):
        cam = _cam(t=(0.3, -0.2, 0.0), R=_rot_x(0.25), w=16, h=16, focal=16.0)
        ray = G.make_ray(cam, 5.0, 11.0)
        point = ray.origin + 2.3 * ray.direction
        uv = G.project_point(point, cam)
        assert uv.in_bounds
        np.testing.assert_allclose([uv.u, uv.v], [5.0, 11.0], atol=1e-9)

    def test_point_behind_camera_flagged(self):
        uv = G.project_point(np.array([0.0, 0.0, -1.0]), _cam())
        assert not uv.in_bounds

    def test_point_at_center_rejected(self):
        cam = _cam()
        with pytest.raises(ValueError):
            G.project_point(cam.t, cam)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(0)
        cam = _cam(t=(0.5, 0.5, -2.0), R=_rot_x(0.1), w=12, h=10, focal=14.0)
        pts = rng.uniform(-2, 2, (40, 3))
        u, v, depth, valid = G.project_points(pts, cam)
        for i, p in enumerate(pts):
            uv1 = G.project_point(p, cam)
            assert bool(valid[i]) == uv1.in_bounds
            if valid[i]:
                np.testing.assert_allclose([u[i], v[i]], [uv1.u, uv1.v],
                                           atol=1e-9)
                pc = cam.R.T @ (p - cam.t)
                np.testing.assert_allclose(depth[i], pc[2], atol=1e-12)

    def test_in_bounds_respects_image_size(self):
        cam = _cam(w=4, h=4, focal=4.0)
        uv = G.project_point(np.array([50.0, 0.0, 1.0]), cam)
        assert not uv.in_bounds


class TestBilinear:
    def test_exact_at_grid_nodes(self):
        rng = np.random.default_rng(1)
        img = rng.random((5, 6, 3))
        for y in range(5):
            for x in range(6):
                out = G.bilinear_sample(img, G.PixelUV(float(x), float(y), True))
                np.testing.assert_allclose(out, img[y, x], atol=1e-14)

    def test_midpoint_average(self):
        img = np.zeros((2, 2, 1))
        img[0, 0] = 1.0
        img[1, 1] = 3.0
        np.testing.assert_allclose(
            G.bilinear_sample(img, G.PixelUV(0.5, 0.5, True)), [1.0])

    def test_out_of_bounds_raises(self):
        img = np.zeros((4, 4, 3))
        with pytest.raises(ValueError):
            G.bilinear_sample(img, G.PixelUV(-0.5, 1.0, False))


class TestSampling:
    def test_stratified_one_per_bin(self):
        rng = np.random.default_rng(0)
        t = G.sample_points_stratified(1.0, 3.0, 16, rng)
        edges = np.linspace(1.0, 3.0, 17)
        assert np.all(t[:-1] < t[1:])
        assert np.all((t >= edges[:-1]) & (t < edges[1:]))

    def test_midpoint_deterministic(self):
        t = G.sample_points_midpoint(0.0, 1.0, 4)
        np.testing.assert_allclose(t, [0.125, 0.375, 0.625, 0.875])

    def test_invalid_inputs(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            G.sample_points_stratified(1.0, 3.0, 0, rng)
        with pytest.raises(ValueError):
            G.sample_points_stratified(3.0, 1.0, 4, rng)
        with pytest.raises(ValueError):
            G.sample_points_midpoint(0.0, 1.0, 0)


class TestPoseDifference:
    def test_identical_pose_zero(self):
        cam = _cam(t=(1.0, 2.0, 3.0), R=_rot_x(0.8))
        assert G.pose_difference(cam, cam) == 0.0

    def test_symmetry(self):
        a = _cam(t=(0.0, 0.0, 0.0))
        b = _cam(t=(1.0, 0.0, 0.0), R=_rot_x(0.5))
        assert np.isclose(G.pose_difference(a, b), G.pose_difference(b, a))

    def test_translation_only(self):
        a = _cam(t=(0.0, 0.0, 0.0))
        b = _cam(t=(3.0, 4.0, 0.0))
        np.testing.assert_allclose(G.pose_difference(a, b), 5.0)

    def test_rotation_angle_known_values(self):
        assert np.isclose(G.rotation_angle(np.eye(3), _rot_x(0.9)), 0.9)
        assert np.isclose(G.rotation_angle(np.eye(3), _rot_x(np.pi)), np.pi)

    def test_rotation_weight_scales(self):
        a = _cam()
        b = _cam(R=_rot_x(0.5))
        d1 = G.pose_difference(a, b, rotation_weight=1.0)
        d2 = G.pose_difference(a, b, rotation_weight=2.0)
        np.testing.assert_allclose(d2, 2.0 * d1)

    def test_triangle_inequality_sampled(self):
        rng = np.random.default_rng(7)
        cams = [_cam(t=rng.uniform(-2, 2, 3), R=_rot_x(rng.uniform(-np.pi, np.pi)))
                for _ in range(6)]
        for a in cams:
            for b in cams:
                for c in cams:
                    assert (G.pose_difference(a, c)
                            <= G.pose_difference(a, b)
                            + G.pose_difference(b, c) + 1e-12)


class TestViewDirection:
    def test_unit_and_pointing_from_camera(self):
        cam = _cam(t=(0.0, 0.0, -3.0))
        d = G.view_direction(cam, np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(d, [0.0, 0.0, 1.0], atol=1e-12)

    def test_undefined_at_center(self):
        cam = _cam(t=(1.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            G.view_direction(cam, cam.t)
