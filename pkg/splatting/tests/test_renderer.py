import numpy as np
from django.test import SimpleTestCase

from splatting.renderer import (
    Camera,
    Kernel1D,
    RenderOptions,
    Splats,
    additive_render_1d,
    backward,
    leave_one_out_oracle,
    opacity_sensitivity,
    project,
    render,
)

SMOOTH = RenderOptions(footprint_sigmas=10.0)


def front_camera(width=16, height=16, focal=None):
    """Looks along +y at the origin from distance 3."""
    return Camera.look_at((0.0, -3.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), focal or float(width), width, height)


def random_scene(rng, count, spread=0.6, opacity=(0.1, 0.9)):
    return Splats(
        positions=rng.uniform(-spread, spread, size=(count, 3)),
        opacities=rng.uniform(*opacity, size=count),
        scales=rng.uniform(0.05, 0.25, size=count),
        colors=rng.uniform(0.0, 1.0, size=(count, 3)),
    )


class CameraTests(SimpleTestCase):
    def test_look_at_puts_target_on_axis(self):
        camera = front_camera()
        np.testing.assert_allclose(camera.to_camera([[0.0, 0.0, 0.0]]), [[0.0, 0.0, 3.0]], atol=1e-12)
        np.testing.assert_allclose(camera.center, [0.0, -3.0, 0.0], atol=1e-12)

    def test_rejects_non_rotation(self):
        with self.assertRaises(ValueError):
            Camera(np.diag([1.0, 2.0, 1.0]), np.zeros(3), 10.0, 8, 8)

    def test_points_behind_camera_are_culled(self):
        camera = front_camera()
        projection = project(camera, [[0.0, -4.0, 0.0], [0.0, 1.0, 0.0]], [0.1, 0.1])
        self.assertEqual(list(projection.visible), [False, True])


class RenderTests(SimpleTestCase):
    def test_empty_scene_is_background(self):
        camera = front_camera(8, 6)
        image, graph = render(Splats.empty(), camera, (0.2, 0.3, 0.4))
        self.assertEqual(image.shape, (6, 8, 3))
        np.testing.assert_array_equal(image, np.broadcast_to([0.2, 0.3, 0.4], (6, 8, 3)))
        np.testing.assert_array_equal(graph.final_transmittance, np.ones(48))

    def test_single_splat_at_pixel_centre(self):
        camera = front_camera(5, 5)
        splats = Splats([[0.0, 0.0, 0.0]], [0.6], [0.1], [[1.0, 0.5, 0.0]])
        image, _ = render(splats, camera, (0.0, 0.0, 1.0))
        np.testing.assert_allclose(image[2, 2], [0.6, 0.3, 0.4], atol=1e-12)

    def test_front_splat_occludes(self):
        camera = front_camera(5, 5)
        splats = Splats([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]], [0.5, 0.5], [0.2, 0.2],
                        [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        image, _ = render(splats, camera, (0.0, 0.0, 0.0))
        # the red splat is nearer, so the centre pixel is mostly red
        self.assertGreater(image[2, 2, 0], image[2, 2, 1])
        np.testing.assert_allclose(image[2, 2], [0.5, 0.25, 0.0], atol=1e-12)

    def test_equal_depth_ties_break_by_index(self):
        camera = front_camera(5, 5)
        splats = Splats([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], [0.5, 0.5], [0.1, 0.1],
                        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        image, _ = render(splats, camera)
        np.testing.assert_allclose(image[2, 2], [0.5, 0.25, 0.0], atol=1e-12)

    def test_alpha_is_clamped(self):
        camera = front_camera(5, 5)
        splats = Splats([[0.0, 0.0, 0.0]], [1.0], [0.1], [[1.0, 1.0, 1.0]])
        image, graph = render(splats, camera, (0.0, 0.0, 0.0))
        self.assertAlmostEqual(float(image[2, 2, 0]), 0.999, delta=1e-12)
        self.assertTrue(graph.clamped.any())

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        splats = random_scene(rng, 40)
        camera = front_camera()
        first, _ = render(splats, camera, (0.1, 0.1, 0.1))
        second, _ = render(splats, camera, (0.1, 0.1, 0.1))
        np.testing.assert_array_equal(first, second)

    def test_render_cap_keeps_seeded_subset(self):
        rng = np.random.default_rng(1)
        splats = random_scene(rng, 30)
        options = RenderOptions(render_cap=10, cap_seed=4)
        with self.assertLogs("splatting.renderer", level="WARNING"):
            image, graph = render(splats, front_camera(), (0.0, 0.0, 0.0), options)
        self.assertEqual(len(graph.splats), 10)
        self.assertEqual(graph.count, 30)
        expected, _ = render(splats.take(graph.index), front_camera(), (0.0, 0.0, 0.0))
        np.testing.assert_allclose(image, expected, atol=1e-15)


class LeaveOneOutTests(SimpleTestCase):
    def test_sensitivity_equals_omit_and_rerender(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            count = int(rng.integers(1, 65))
            splats = random_scene(rng, count, opacity=(0.05, 0.99))
            camera = front_camera(16, 16)
            background = rng.uniform(0, 1, 3)
            image, graph = render(splats, camera, background)
            sensitivity = opacity_sensitivity(graph)
            for i in range(count):
                without = leave_one_out_oracle(splats, camera, i, background)
                np.testing.assert_allclose(image - without, sensitivity[i], rtol=0, atol=1e-10)

    def test_clamped_alpha_still_gives_exact_difference(self):
        camera = front_camera(5, 5)
        splats = Splats([[0.0, 0.0, 0.0], [0.0, 0.5, 0.0]], [1.0, 0.7], [0.2, 0.3],
                        [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        image, graph = render(splats, camera, (0.2, 0.2, 0.2))
        sensitivity = opacity_sensitivity(graph)
        for i in range(2):
            np.testing.assert_allclose(image - leave_one_out_oracle(splats, camera, i, (0.2, 0.2, 0.2)),
                                       sensitivity[i], atol=1e-12)

    def test_contracted_weights_match_images(self):
        rng = np.random.default_rng(3)
        splats = random_scene(rng, 12)
        image, graph = render(splats, front_camera(), (0.3, 0.3, 0.3))
        adjoint = rng.normal(size=image.shape)
        weights = opacity_sensitivity(graph, adjoint)
        images = opacity_sensitivity(graph)
        np.testing.assert_allclose(weights, np.einsum("phwc,hwc->p", images, adjoint), atol=1e-12)

    def test_invisible_splat_has_zero_weight(self):
        camera = front_camera()
        splats = Splats([[0.0, 0.0, 0.0], [0.0, -5.0, 0.0]], [0.5, 0.5], [0.1, 0.1], np.ones((2, 3)))
        _, graph = render(splats, camera)
        weights = opacity_sensitivity(graph, np.ones((16, 16, 3)))
        self.assertEqual(weights[1], 0.0)
        self.assertNotEqual(weights[0], 0.0)


class BackwardTests(SimpleTestCase):
    def loss(self, splats, camera, background, adjoint):
        image, _ = render(splats, camera, background, SMOOTH)
        return float(np.sum(image * adjoint))

    def test_matches_central_differences(self):
        rng = np.random.default_rng(4)
        h = 1e-6
        camera = front_camera(12, 12)
        for _ in range(100):
            splats = random_scene(rng, int(rng.integers(1, 5)), spread=0.4, opacity=(0.1, 0.8))
            background = rng.uniform(0, 1, 3)
            adjoint = rng.normal(size=(12, 12, 3))
            _, graph = render(splats, camera, background, SMOOTH)
            grads = backward(graph, adjoint)
            i = int(rng.integers(len(splats)))

            def shifted(field, index, delta):
                copy = Splats(splats.positions.copy(), splats.opacities.copy(), splats.scales.copy(),
                              splats.colors.copy())
                getattr(copy, field)[index] += delta
                return self.loss(copy, camera, background, adjoint)

            checks = [
                ("opacities", i, grads.opacity[i]),
                ("scales", i, grads.scale[i]),
                ("colors", (i, 1), grads.color[i, 1]),
                ("positions", (i, 0), grads.position[i, 0]),
                ("positions", (i, 1), grads.position[i, 1]),
                ("positions", (i, 2), grads.position[i, 2]),
            ]
            for field, index, analytic in checks:
                numeric = (shifted(field, index, h) - shifted(field, index, -h)) / (2 * h)
                self.assertAlmostEqual(analytic, numeric, delta=1e-5 * max(1.0, abs(numeric)),
                                       msg=f"{field}{index}")

    def test_clamped_alpha_has_no_opacity_gradient(self):
        camera = front_camera(5, 5)
        splats = Splats([[0.0, 0.0, 0.0]], [1.0], [0.01], [[1.0, 1.0, 1.0]])
        _, graph = render(splats, camera, (0.0, 0.0, 0.0), RenderOptions(pixel_dilation=0.01))
        grads = backward(graph, np.ones((5, 5, 3)))
        self.assertEqual(grads.opacity[0], 0.0)
        np.testing.assert_array_equal(grads.position[0], 0.0)

    def test_zero_adjoint_gives_zero_gradients(self):
        rng = np.random.default_rng(5)
        splats = random_scene(rng, 8)
        _, graph = render(splats, front_camera())
        grads = backward(graph, np.zeros((16, 16, 3)))
        for values in (grads.opacity, grads.color, grads.scale, grads.position):
            np.testing.assert_array_equal(values, 0.0)


class AdditiveModelTests(SimpleTestCase):
    def test_empty_signal_is_zero(self):
        grid = np.linspace(0, 1, 20)
        np.testing.assert_array_equal(additive_render_1d([], Kernel1D(), grid), np.zeros(20))

    def test_signal_is_sum_of_kernels(self):
        grid = np.linspace(0, 1, 50)
        kernel = Kernel1D(amplitude=0.7, width=0.1)
        signal = additive_render_1d([0.2, 0.6], kernel, grid)
        np.testing.assert_allclose(signal, kernel(grid, [0.2])[0] + kernel(grid, [0.6])[0])

    def test_center_derivative_matches_finite_differences(self):
        grid = np.linspace(0, 1, 30)
        kernel = Kernel1D(width=0.07)
        h = 1e-7
        numeric = (kernel(grid, [0.4 + h]) - kernel(grid, [0.4 - h])) / (2 * h)
        np.testing.assert_allclose(kernel.center_derivative(grid, [0.4]), numeric, atol=1e-5)
