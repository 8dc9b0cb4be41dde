"""Tests for the synthetic scene and the blur degradations"""
import math

import numpy as np
import pytest

from bags.blur_synth import (
    DEFOCUS_KERNEL,
    BlurSpec,
    defocus_kernels,
    degrade_defocus,
    degrade_mixres,
    degrade_motion,
    make_toy_scene,
    motion_kernel,
    render_clean,
    ring_cameras,
    seed_points,
    synthesize,
)
from bags.errors import ConfigError, SceneError, ShapeError


class TestMotion:
    def test_zero_length_is_identity(self, rng):
        image = rng.uniform(size=(3, 12, 12))
        np.testing.assert_array_equal(degrade_motion(image, 0.7, 0.0), image)
        np.testing.assert_array_equal(motion_kernel(0.7, 0.0), [[1.0]])

    def test_kernel_is_normalized(self):
        for angle in (0.0, 0.4, math.pi / 3, 2.0):
            kernel = motion_kernel(angle, 7.5)
            assert kernel.shape == (9, 9)
            assert kernel.sum() == pytest.approx(1.0)
            assert kernel.min() >= 0.0

    def test_horizontal_kernel_stays_on_center_row(self):
        kernel = motion_kernel(0.0, 6.0)
        assert kernel.shape == (7, 7)
        assert kernel[3].sum() == pytest.approx(1.0)
        assert not np.delete(kernel, 3, axis=0).any()

    def test_vertical_kernel_stays_on_center_column(self):
        kernel = motion_kernel(math.pi / 2, 6.0)
        assert kernel[:, 3].sum() == pytest.approx(1.0, abs=1e-9)

    def test_point_becomes_horizontal_streak(self):
        image = np.zeros((3, 15, 15))
        image[:, 7, 7] = 1.0
        blurred = degrade_motion(image, 0.0, 6.0)
        assert not np.delete(blurred, 7, axis=1).any()
        lit = np.nonzero(blurred[0, 7])[0]
        assert lit.min() == 4 and lit.max() == 10
        assert blurred[0, 7].sum() == pytest.approx(1.0)

    def test_constant_image_is_preserved(self):
        image = np.full((3, 10, 10), 0.3)
        np.testing.assert_allclose(degrade_motion(image, 1.1, 5.0), 0.3, atol=1e-12)

    def test_negative_length(self):
        with pytest.raises(ConfigError):
            motion_kernel(0.0, -1.0)


class TestDefocus:
    def test_zero_gain_is_identity(self, rng):
        image = rng.uniform(size=(3, 8, 8))
        depth = rng.uniform(1.0, 5.0, size=(8, 8))
        np.testing.assert_array_equal(degrade_defocus(image, depth, 3.0, 0.0), image)

    def test_in_focus_pixels_are_untouched(self, rng):
        image = rng.uniform(size=(3, 8, 8))
        depth = np.full((8, 8), 3.0)
        depth[:, 4:] = 5.0
        out = degrade_defocus(image, depth, 3.0, 2.5)
        np.testing.assert_allclose(out[:, :, 0], image[:, :, 0])
        assert not np.allclose(out[:, :, 4:], image[:, :, 4:])

    def test_kernels(self):
        sigma = np.array([[0.0, 1.0], [2.0, 100.0]])
        kernels = defocus_kernels(sigma)
        assert kernels.shape == (2, 2, DEFOCUS_KERNEL, DEFOCUS_KERNEL)
        np.testing.assert_allclose(kernels.sum(axis=(2, 3)), 1.0)
        assert kernels[0, 0, DEFOCUS_KERNEL // 2, DEFOCUS_KERNEL // 2] == 1.0
        assert kernels[1, 0].max() < kernels[0, 1].max()

    def test_constant_image_is_preserved(self, rng):
        image = np.full((3, 10, 10), 0.6)
        depth = rng.uniform(1.0, 5.0, size=(10, 10))
        np.testing.assert_allclose(degrade_defocus(image, depth, 3.0, 2.5), 0.6, atol=1e-12)

    def test_depth_must_align(self):
        with pytest.raises(ShapeError):
            degrade_defocus(np.zeros((3, 8, 8)), np.zeros((8, 9)), 3.0, 1.0)

    def test_negative_gain(self):
        with pytest.raises(ConfigError):
            degrade_defocus(np.zeros((3, 8, 8)), np.zeros((8, 8)), 3.0, -1.0)


class TestMixedResolution:
    def test_four_equal_parts(self, rng):
        images = [rng.uniform(size=(3, 24, 24)) for _ in range(24)]
        degraded, factors = degrade_mixres(images, seed=3)
        assert {f: factors.count(f) for f in set(factors)} == {4: 6, 3: 6, 2: 6, 1: 6}
        for image, out, factor in zip(images, degraded, factors):
            assert out.shape == image.shape
            if factor == 1:
                np.testing.assert_array_equal(out, image)
            else:
                assert not np.array_equal(out, image)

    def test_assignment_depends_on_seed_only(self, rng):
        images = [rng.uniform(size=(3, 8, 8)) for _ in range(8)]
        assert degrade_mixres(images, 9)[1] == degrade_mixres(images, 9)[1]

    def test_too_few_views(self, rng):
        with pytest.raises(ConfigError):
            degrade_mixres([rng.uniform(size=(3, 8, 8))] * 3, 0)


class TestToyScene:
    def test_cameras_on_ring(self):
        cameras = ring_cameras(8, size=32)
        assert [c.view_index for c in cameras] == list(range(8))
        for camera in cameras:
            assert np.linalg.norm(camera.center[:2]) == pytest.approx(3.0)
            assert camera.center[2] == pytest.approx(0.5)

    def test_test_views_sit_between_training_views(self):
        scene = make_toy_scene(0, n_gaussians=12, n_views=6, size=16)
        train = scene.train_cameras[0].center
        test = scene.test_cameras[0].center
        angle = math.atan2(test[1], test[0]) - math.atan2(train[1], train[0])
        assert angle == pytest.approx(math.pi / 6)

    def test_too_few_gaussians(self):
        with pytest.raises(SceneError):
            make_toy_scene(0, n_gaussians=5)

    def test_clean_depth_fills_background(self):
        scene = make_toy_scene(2, n_gaussians=12, n_views=4, size=24)
        color, depth = render_clean(scene.cloud, scene.train_cameras[:1])[0]
        assert color.shape == (3, 24, 24)
        assert color.min() >= 0.0 and color.max() <= 1.0
        assert np.all(depth > 0)

    def test_seed_points(self):
        scene = make_toy_scene(1, n_gaussians=50, n_views=4, size=16)
        points, colors = seed_points(scene.cloud, 1)
        assert points.shape == (10, 3) and colors.shape == (10, 3)
        distance = np.linalg.norm(points[:, None, :] - scene.cloud.positions.data[None], axis=2).min(axis=1)
        assert distance.max() < 0.2


class TestSynthesize:
    def test_deterministic(self):
        spec = BlurSpec("motion", angle=0.5, length=4.0, seed=4)
        a = synthesize(spec, n_gaussians=20, n_views=4, size=24)
        b = synthesize(spec, n_gaussians=20, n_views=4, size=24)
        for x, y in zip(a.train_images + a.test_images, b.train_images + b.test_images):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(a.points, b.points)
        assert a.degradation == b.degradation

    def test_records(self):
        data = synthesize(BlurSpec("defocus", seed=1), n_gaussians=12, n_views=4, size=16)
        assert len(data.train_images) == len(data.test_images) == 4
        assert data.degradation[2] == {"view": 2, "kind": "defocus", "focus_depth": 3.0, "aperture_gain": 2.5}

    def test_no_blur(self):
        data = synthesize(BlurSpec("none", seed=1), n_gaussians=12, n_views=4, size=16)
        clean = render_clean(data.scene.cloud, data.scene.train_cameras)
        np.testing.assert_array_equal(data.train_images[0], clean[0][0])

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            BlurSpec("rolling-shutter")
        with pytest.raises(ConfigError):
            BlurSpec("motion", length=-2.0)
