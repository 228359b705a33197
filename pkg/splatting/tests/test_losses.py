import math

import numpy as np
from django.test import SimpleTestCase

from splatting.losses import LossConfig, loss_and_adjoint, metrics_psnr_ssim, psnr, ssim, ssim_and_grad

NO_REG = LossConfig(lambda_opacity=0.0, lambda_scale=0.0, lambda_color=0.0)


def no_primitives():
    return np.zeros(0), np.zeros(0), np.zeros((0, 4, 3))


class MetricTests(SimpleTestCase):
    def test_identical_images(self):
        image = np.random.default_rng(0).uniform(size=(16, 16, 3))
        scores = metrics_psnr_ssim(image, image)
        self.assertEqual(scores["psnr"], math.inf)
        self.assertAlmostEqual(scores["ssim"], 1.0, delta=1e-12)

    def test_constant_half_against_black(self):
        self.assertAlmostEqual(psnr(np.full((8, 8, 3), 0.5), np.zeros((8, 8, 3))), 6.0206, delta=1e-4)

    def test_psnr_is_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(2, 10, 10, 3))
        self.assertEqual(psnr(a, b), psnr(b, a))

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            ssim(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_ssim_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x, y = rng.uniform(size=(2, 12, 12, 3))
        _, grad = ssim_and_grad(x, y)
        h = 1e-6
        for _ in range(20):
            index = tuple(int(rng.integers(n)) for n in x.shape)
            up, down = x.copy(), x.copy()
            up[index] += h
            down[index] -= h
            numeric = (ssim(up, y) - ssim(down, y)) / (2 * h)
            self.assertAlmostEqual(grad[index], numeric, delta=1e-5 * max(1.0, abs(numeric)))


class LossTests(SimpleTestCase):
    def test_perfect_match_without_regularisers(self):
        image = np.random.default_rng(3).uniform(size=(8, 8, 3))
        result = loss_and_adjoint(image, image, *no_primitives(), NO_REG)
        self.assertAlmostEqual(result.value, 0.0, delta=1e-12)

    def test_image_term_mixes_l1_and_dssim(self):
        rng = np.random.default_rng(4)
        image, target = rng.uniform(size=(2, 16, 16, 3))
        result = loss_and_adjoint(image, target, *no_primitives(), NO_REG)
        expected = 0.8 * np.mean(np.abs(image - target)) + 0.2 * (1.0 - ssim(image, target))
        self.assertAlmostEqual(result.value, expected, delta=1e-12)

    def test_opacity_below_threshold_is_free(self):
        image = np.zeros((4, 4, 3))
        result = loss_and_adjoint(image, image, [0.04], [0.0], np.zeros((1, 4, 3)))
        self.assertEqual(result.value, 0.0)
        self.assertEqual(result.d_opacity[0], 0.0)

    def test_degree_zero_colour_is_free(self):
        image = np.zeros((4, 4, 3))
        sh = np.zeros((1, 4, 3))
        sh[0, 0] = [3.0, -2.0, 1.0]
        result = loss_and_adjoint(image, image, [0.0], [0.0], sh)
        self.assertEqual(result.value, 0.0)

    def test_regulariser_values_and_reduction(self):
        image = np.zeros((4, 4, 3))
        sh = np.ones((2, 4, 3))
        config = LossConfig(reduction="sum")
        result = loss_and_adjoint(image, image, [0.5, 0.01], [0.2, 0.1], sh, config)
        per = [0.05 * 0.5 + 0.02 * 0.2 + 1e-3 * 0.2 * 9, 0.02 * 0.1 + 1e-3 * 0.2 * 9]
        np.testing.assert_allclose(result.regularizer, per, atol=1e-15)
        mean = loss_and_adjoint(image, image, [0.5, 0.01], [0.2, 0.1], sh, LossConfig())
        np.testing.assert_allclose(mean.regularizer, np.array(per) / 2, atol=1e-15)

    def test_image_adjoint_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        image, target = rng.uniform(size=(2, 10, 10, 3))
        result = loss_and_adjoint(image, target, *no_primitives(), NO_REG)
        h = 1e-7
        for _ in range(20):
            index = tuple(int(rng.integers(n)) for n in image.shape)
            up, down = image.copy(), image.copy()
            up[index] += h
            down[index] -= h
            numeric = (loss_and_adjoint(up, target, *no_primitives(), NO_REG).value
                       - loss_and_adjoint(down, target, *no_primitives(), NO_REG).value) / (2 * h)
            self.assertAlmostEqual(result.dl_dimage[index], numeric, delta=1e-6)

    def test_invalid_config(self):
        with self.assertRaises(ValueError):
            LossConfig(tau=1.5)
        with self.assertRaises(ValueError):
            LossConfig(lambda_scale=-1.0)
