import numpy as np
import pytest

from utils.bspline import (
    SplineSupportError,
    prefilter_bspline,
    sample_interpolated,
    sample_points,
    stack_coefficients,
)
from utils.volume_io import ImageVolume


def _ramp(slope=1.0, n=40):
    return ImageVolume(np.broadcast_to(slope * np.arange(n, dtype=np.float64)[:, None, None], (n, 6, 6)))


class TestPrefilter:

    def test_constant_volume(self):
        coeffs = prefilter_bspline(ImageVolume(np.full((6, 6, 6), 3.5)))
        np.testing.assert_allclose(coeffs.coeffs, 3.5, atol=1e-10)
        values, grads, inside = sample_points(coeffs, np.array([[1.2, 2.7, 3.9], [4.0, 1.0, 2.5]]))
        assert inside.all()
        np.testing.assert_allclose(values, 3.5, atol=1e-10)
        np.testing.assert_allclose(grads, 0.0, atol=1e-10)

    def test_too_small(self):
        with pytest.raises(ValueError):
            prefilter_bspline(ImageVolume(np.zeros((3, 6, 6))))

    def test_grid_points_reproduced(self, random_volume):
        coeffs = prefilter_bspline(random_volume)
        idx = np.stack(np.meshgrid(*[np.arange(1, n - 1) for n in random_volume.dims], indexing="ij"), -1)
        idx = idx.reshape(-1, 3).astype(np.float64)
        values, _, inside = sample_points(coeffs, idx)
        assert inside.all()
        expected = random_volume.data[tuple(idx.astype(int).T)]
        np.testing.assert_allclose(values, expected, atol=1e-6)

    @pytest.mark.parametrize("n", [6, 16])
    def test_linear_ramp_whole_support(self, n):
        coeffs = prefilter_bspline(_ramp(n=n))
        xs = np.concatenate([np.linspace(1.0, n - 2.0, 4 * n), [1.5, n - 2.5]])
        pts = np.column_stack([xs, np.full_like(xs, 2.5), np.full_like(xs, 1.0)])
        values, grads, inside = sample_points(coeffs, pts)
        assert inside.all()
        np.testing.assert_allclose(values, xs, atol=1e-6)
        np.testing.assert_allclose(grads, np.tile([1.0, 0.0, 0.0], (len(xs), 1)), atol=1e-6)

    def test_ramp_along_every_axis(self, rng):
        grid = np.indices((12, 10, 8), dtype=np.float64)
        data = 0.5 * grid[0] - 1.5 * grid[1] + 2.0 * grid[2]
        coeffs = prefilter_bspline(ImageVolume(data))
        pts = rng.uniform(1.0, np.array([10.0, 8.0, 6.0]), size=(200, 3))
        values, grads, _ = sample_points(coeffs, pts)
        np.testing.assert_allclose(values, pts @ [0.5, -1.5, 2.0], atol=1e-6)
        np.testing.assert_allclose(grads, np.tile([0.5, -1.5, 2.0], (200, 1)), atol=1e-6)


class TestSampleInterpolated:

    def test_constant_gradient_zero(self):
        coeffs = prefilter_bspline(ImageVolume(np.full((5, 5, 5), -2.0)))
        value, grad = sample_interpolated(coeffs, (2.3, 1.7, 3.0))
        assert value == pytest.approx(-2.0, abs=1e-10)
        np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_ramp_gradient(self):
        coeffs = prefilter_bspline(_ramp(slope=2.0))
        _, grad = sample_interpolated(coeffs, (19.4, 2.2, 3.1))
        np.testing.assert_allclose(grad, [2.0, 0.0, 0.0], atol=1e-6)

    def test_gradient_matches_finite_differences(self, random_volume, rng):
        coeffs = prefilter_bspline(random_volume)
        h = 1e-4
        for _ in range(10):
            p = rng.uniform(1.5, np.asarray(random_volume.dims) - 2.5)
            _, grad = sample_interpolated(coeffs, p)
            numeric = np.zeros(3)
            for i in range(3):
                e = np.zeros(3)
                e[i] = h
                numeric[i] = (sample_interpolated(coeffs, p + e)[0] - sample_interpolated(coeffs, p - e)[0]) / (2 * h)
            assert np.linalg.norm(grad - numeric) <= 1e-4 * max(np.linalg.norm(numeric), 1e-8)

    def test_outside_support_zero_padded(self, random_volume):
        coeffs = prefilter_bspline(random_volume)
        value, grad = sample_interpolated(coeffs, (0.5, 3.0, 3.0))
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_outside_support_error_policy(self, random_volume):
        coeffs = prefilter_bspline(random_volume)
        with pytest.raises(SplineSupportError):
            sample_interpolated(coeffs, (3.0, 3.0, 9.5), policy="error")


class TestStacked:

    def test_stacked_matches_single(self, random_volume, rng):
        a = prefilter_bspline(random_volume)
        b = prefilter_bspline(random_volume.with_data(random_volume.data ** 2))
        both = stack_coefficients(a, b)
        pts = rng.uniform(1.0, 5.0, size=(20, 3))
        values, grads, inside = sample_points(both, pts)
        assert values.shape == (2, 20)
        assert grads.shape == (2, 20, 3)
        np.testing.assert_allclose(values[1], sample_points(b, pts)[0])
        np.testing.assert_allclose(grads[0], sample_points(a, pts)[1])
        assert inside.all()

    def test_dims_must_agree(self, random_volume):
        other = prefilter_bspline(ImageVolume(np.zeros((5, 5, 5))))
        with pytest.raises(ValueError):
            stack_coefficients(prefilter_bspline(random_volume), other)
