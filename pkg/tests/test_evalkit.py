"""Evalkit tests: metric closed forms, the multi-scale similarity pipeline
against the TensorFlow reference (skipped when unavailable), analytic scene
geometry, and the z-buffered point baseline.

The sphere-silhouette check is exact: with fx=150, d=4, r=1 the disk radius
squared is 1500, which is not a sum of two squares, so no pixel lands on the
boundary and the per-pixel comparison has an integer margin.
"""
import json
import math

import numpy as np
import pytest

from splatforge.evalkit import (
    MetricReport,
    hole_ratio,
    make_scene,
    ms_ssim,
    psnr,
    render_1px_points,
)
from splatforge.gaussians import Camera
from splatforge.pcio import PointCloud
from splatforge.rasterizer import FrameBuffer


def axis_camera(width=64, height=64, fx=100.0, fy=100.0, translation=(0, 0, 0)):
    return Camera(np.eye(3), np.asarray(translation, dtype=np.float64), fx, fy,
                  width / 2.0, height / 2.0, width, height)


class TestPsnr:
    def test_identical_images_flag_infinite(self):
        a = np.random.default_rng(0).random((16, 16, 3))
        assert math.isinf(psnr(a, a.copy()))

    def test_constant_difference_closed_form(self):
        a = np.full((8, 8, 3), 0.3)
        b = a + 5.0 / 255.0
        np.testing.assert_allclose(psnr(a, b), 20.0 * np.log10(255.0 / 5.0),
                                   rtol=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_strictly_decreasing_under_noise(self):
        rng = np.random.default_rng(2)
        a = 0.2 + 0.6 * rng.random((32, 32, 3))
        noise = rng.uniform(-1.0, 1.0, size=a.shape)
        values = [psnr(a, a + amp * noise) for amp in (0.02, 0.05, 0.1, 0.2)]
        assert all(y < x for x, y in zip(values, values[1:]))


def block_checker(size=176, block=16, lo=0.1, hi=0.9):
    iy, ix = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cells = ((iy // block + ix // block) & 1).astype(np.float64)
    img = lo + (hi - lo) * cells
    return np.repeat(img[:, :, None], 3, axis=2)


def smooth_noise(rng, size=176):
    img = rng.random((size + 16, size + 16, 3))
    for _ in range(3):
        img = 0.25 * (img + np.roll(img, 1, 0) + np.roll(img, 1, 1) +
                      np.roll(img, (1, 1), (0, 1)))
    return np.ascontiguousarray(img[8:8 + size, 8:8 + size])


class TestMsSsim:
    def test_identical_images_score_one(self):
        a = smooth_noise(np.random.default_rng(3))
        assert abs(ms_ssim(a, a.copy()) - 1.0) <= 1e-9

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = smooth_noise(rng), smooth_noise(rng)
        assert abs(ms_ssim(a, b) - ms_ssim(b, a)) <= 1e-9

    def test_small_image_error_names_minimum(self):
        with pytest.raises(ValueError, match="176"):
            ms_ssim(np.zeros((128, 128, 3)), np.zeros((128, 128, 3)))

    def test_requires_three_channels(self):
        with pytest.raises(ValueError, match="height, width, 3"):
            ms_ssim(np.zeros((176, 176)), np.zeros((176, 176)))

    def test_inversion_scores_low(self):
        a = block_checker()
        assert ms_ssim(a, 1.0 - a) < 0.5

    def test_matches_reference_implementation(self):
        tf = pytest.importorskip("tensorflow")
        rng = np.random.default_rng(5)
        for size in (176, 192):
            a = smooth_noise(rng, size)
            b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0.0, 1.0)
            ref = float(tf.image.ssim_multiscale(
                tf.constant(a[None], dtype=tf.float32),
                tf.constant(b[None], dtype=tf.float32), max_val=1.0)[0])
            np.testing.assert_allclose(ms_ssim(a, b), ref, atol=2e-4)

    def test_inversion_agrees_with_reference(self):
        tf = pytest.importorskip("tensorflow")
        a = block_checker()
        ref = float(tf.image.ssim_multiscale(
            tf.constant(a[None], dtype=tf.float32),
            tf.constant(1.0 - a[None, ...], dtype=tf.float32), max_val=1.0)[0])
        assert ref < 0.5


def frame_with_transmittance(trans):
    h, w = trans.shape
    return FrameBuffer(w, h, np.zeros((h, w, 3)), trans, np.zeros(3))


class TestHoleRatio:
    def test_fully_covered_mask_has_no_holes(self):
        trans = np.ones((8, 8))
        trans[2:6, 2:6] = 0.0
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:6, 2:6] = True
        assert hole_ratio(frame_with_transmittance(trans), mask) == 0.0

    def test_empty_render_is_all_holes(self):
        mask = np.ones((8, 8), dtype=bool)
        assert hole_ratio(frame_with_transmittance(np.ones((8, 8))), mask) == 1.0

    def test_fractional_leak(self):
        trans = np.ones((4, 4))
        trans[:2] = 0.0
        assert hole_ratio(frame_with_transmittance(trans),
                          np.ones((4, 4), dtype=bool)) == 0.5

    def test_empty_mask_is_zero(self):
        assert hole_ratio(frame_with_transmittance(np.ones((4, 4))),
                          np.zeros((4, 4), dtype=bool)) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="silhouette"):
            hole_ratio(frame_with_transmittance(np.ones((4, 4))),
                       np.ones((5, 5), dtype=bool))


class TestMakeScene:
    def test_sphere_points_on_surface_with_outward_normals(self):
        cloud, _ = make_scene("checker_sphere", 500, seed=0)
        radii = np.linalg.norm(cloud.positions, axis=1)
        np.testing.assert_allclose(radii, 1.0, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0,
                                   atol=1e-9)
        assert ((cloud.normals * cloud.positions).sum(axis=1) > 0).all()

    def test_seed_determinism(self):
        a, _ = make_scene("two_box", 300, seed=7)
        b, _ = make_scene("two_box", 300, seed=7)
        c, _ = make_scene("two_box", 300, seed=8)
        np.testing.assert_array_equal(a.positions, b.positions)
        assert not np.array_equal(a.positions, c.positions)

    def test_colors_come_from_the_checker_palette(self):
        for kind in ("checker_sphere", "checker_plane", "two_box"):
            cloud, _ = make_scene(kind, 200, seed=1)
            a = (cloud.colors == [0.92, 0.88, 0.80]).all(axis=1)
            b = (cloud.colors == [0.12, 0.22, 0.35]).all(axis=1)
            assert (a | b).all()
            assert a.any() and b.any()

    def test_plane_geometry(self):
        cloud, _ = make_scene("checker_plane", 200, seed=2)
        np.testing.assert_array_equal(cloud.positions[:, 2], 2.5)
        assert (np.abs(cloud.positions[:, :2]) <= 1.0).all()
        np.testing.assert_array_equal(cloud.normals, np.tile([0, 0, -1.0], (200, 1)))

    def test_box_points_lie_on_a_face(self):
        cloud, _ = make_scene("two_box", 400, seed=3)
        boxes = (([-0.55, 0.0, 2.5], 0.35 * np.ones(3)),
                 ([0.55, 0.15, 2.9], np.array([0.30, 0.45, 0.30])))
        offsets = [np.abs(cloud.positions - c) / h for c, h in boxes]
        on_box = [(off.max(axis=1) <= 1.0 + 1e-12) &
                  np.isclose(off, 1.0).any(axis=1) for off in offsets]
        assert (on_box[0] | on_box[1]).all()

    def test_invalid_arguments(self):
        with pytest.raises(ValueError, match="kind"):
            make_scene("torus", 200, seed=0)
        with pytest.raises(ValueError, match="100"):
            make_scene("checker_sphere", 50, seed=0)

    def test_sphere_silhouette_matches_projected_disk(self):
        _, callback = make_scene("checker_sphere", 100, seed=0)
        cam = axis_camera(width=128, height=128, fx=150.0, fy=150.0,
                          translation=(0.0, 0.0, 4.0))
        ref = callback(cam)
        iy, ix = np.meshgrid(np.arange(128), np.arange(128), indexing="ij")
        dist2 = (ix - 64.0) ** 2 + (iy - 64.0) ** 2
        rho2 = 150.0 ** 2 / (4.0 ** 2 - 1.0)
        np.testing.assert_array_equal(ref.silhouette, dist2 <= rho2)

    def test_sphere_callback_center_pixel(self):
        _, callback = make_scene("checker_sphere", 100, seed=0)
        cam = axis_camera(width=128, height=128, fx=150.0, fy=150.0,
                          translation=(0.0, 0.0, 4.0))
        ref = callback(cam, background=(0.25, 0.5, 0.75))
        # center ray hits (0, 0, -1) in world: the normal faces the camera
        np.testing.assert_allclose(ref.normal[64, 64], [0.0, 0.0, -1.0],
                                   atol=1e-12)
        assert not ref.silhouette[0, 0]
        np.testing.assert_array_equal(ref.rgb[0, 0], [0.25, 0.5, 0.75])
        assert not ref.normal[0, 0].any()

    def test_plane_callback_silhouette_is_the_square(self):
        _, callback = make_scene("checker_plane", 100, seed=0)
        cam = axis_camera(width=96, height=96, fx=80.0, fy=80.0)
        ref = callback(cam)
        # exact projected square: |x| <= 1 at z 2.5 maps to 32 px half-width
        iy, ix = np.meshgrid(np.arange(96), np.arange(96), indexing="ij")
        expected = (np.abs((ix - 48.0) / 80.0 * 2.5) <= 1.0) & \
                   (np.abs((iy - 48.0) / 80.0 * 2.5) <= 1.0)
        np.testing.assert_array_equal(ref.silhouette, expected)
        assert (ref.normal[ref.silhouette] == [0.0, 0.0, -1.0]).all()

    def test_two_box_callback_hits_nearest_box(self):
        _, callback = make_scene("two_box", 100, seed=0)
        cam = axis_camera(width=64, height=64, fx=60.0, fy=60.0)
        ref = callback(cam)
        assert ref.silhouette.any()
        # the ray through the left box front face sees normal -z
        u = (-0.55 / 2.15) * 60.0 + 32.0      # x/z of the left box center
        np.testing.assert_allclose(ref.normal[32, int(round(u))],
                                   [0.0, 0.0, -1.0], atol=1e-12)


class TestRender1px:
    def test_single_point_single_pixel(self):
        cloud = PointCloud(np.array([[0.0, 0.0, 2.5]]),
                           np.array([[0.9, 0.1, 0.2]]))
        cam = axis_camera(width=24, height=24, translation=(0, 0, 0))
        fb = render_1px_points(cloud, cam, background=(0.0, 0.0, 0.0))
        assert (fb.transmittance == 0.0).sum() == 1
        np.testing.assert_array_equal(fb.rgb[12, 12], [0.9, 0.1, 0.2])
        assert fb.transmittance[12, 12] == 0.0

    def test_nearer_point_wins_the_pixel(self):
        cloud = PointCloud(np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 2.0]]),
                           np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
        fb = render_1px_points(cloud, axis_camera(width=16, height=16))
        np.testing.assert_array_equal(fb.rgb[8, 8], [0.0, 1.0, 0.0])

    def test_depth_tie_keeps_first_input(self):
        cloud = PointCloud(np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 2.0]]),
                           np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
        fb = render_1px_points(cloud, axis_camera(width=16, height=16))
        np.testing.assert_array_equal(fb.rgb[8, 8], [1.0, 0.0, 0.0])

    def test_pixel_count_bounded_by_point_count(self):
        rng = np.random.default_rng(6)
        n = 500
        cloud = PointCloud(rng.normal(size=(n, 3)) * 0.3 + [0, 0, 2.5],
                           rng.random((n, 3)))
        fb = render_1px_points(cloud, axis_camera())
        assert (fb.transmittance == 0.0).sum() <= n

    def test_points_behind_camera_culled(self):
        cloud = PointCloud(np.array([[0.0, 0.0, -2.0], [0.0, 0.0, 0.005]]),
                           np.zeros((2, 3)))
        fb = render_1px_points(cloud, axis_camera(width=16, height=16))
        assert (fb.transmittance == 1.0).all()


class TestMetricReport:
    def test_json_line_round_trips(self):
        report = MetricReport(31.5, 0.97, 0.001,
                              {"resolution": [64, 64], "background": [0, 0, 0],
                               "estimator": "local_pca"})
        data = json.loads(report.to_json())
        assert data["psnr_db"] == 31.5
        assert data["metadata"]["estimator"] == "local_pca"

    def test_infinite_psnr_serializes_as_string(self):
        report = MetricReport(float("inf"), 1.0, 0.0, {})
        assert json.loads(report.to_json())["psnr_db"] == "inf"
