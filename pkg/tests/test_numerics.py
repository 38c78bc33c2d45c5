"""Tests for services/numerics.py: clouds, reductions, random streams, finite differences."""

import numpy as np
import pytest

from services.errors import DimensionMismatchError, InvalidParameterError
from services.numerics import (
    ParticleCloud,
    SeededRng,
    finite_diff_gradient,
    gaussian_sample,
    logsumexp_cols,
    logsumexp_rows,
)


# ════════════════════════════════════════════════════════════════
# ParticleCloud
# ════════════════════════════════════════════════════════════════


class TestParticleCloud:
    def test_shape_and_moments(self):
        cloud = ParticleCloud([[0.0, 1.0], [2.0, 3.0]])
        assert (cloud.n, cloud.d) == (2, 2)
        np.testing.assert_allclose(cloud.mean(), [1.0, 2.0])
        np.testing.assert_allclose(cloud.variance(), [1.0, 1.0])

    def test_points_are_read_only(self):
        cloud = ParticleCloud(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 1.0

    def test_rejects_vector(self):
        with pytest.raises(DimensionMismatchError):
            ParticleCloud(np.zeros(4))

    def test_rejects_nan(self):
        with pytest.raises(InvalidParameterError):
            ParticleCloud([[0.0, np.nan]])

    def test_permuted(self):
        cloud = ParticleCloud([[0.0], [1.0], [2.0]])
        np.testing.assert_array_equal(cloud.permuted([2, 0, 1]).points[:, 0], [2.0, 0.0, 1.0])


# ════════════════════════════════════════════════════════════════
# logsumexp_rows / logsumexp_cols
# ════════════════════════════════════════════════════════════════


class TestLogSumExp:
    def test_matches_direct_formula(self):
        M = np.array([[0.0, 1.0, 2.0], [-1.0, 0.5, 0.0]])
        np.testing.assert_allclose(logsumexp_rows(M), np.log(np.exp(M).sum(axis=1)), rtol=1e-14)
        np.testing.assert_allclose(logsumexp_cols(M), np.log(np.exp(M).sum(axis=0)), rtol=1e-14)

    def test_large_entries_do_not_overflow(self):
        M = np.array([[1000.0, 1000.0]])
        np.testing.assert_allclose(logsumexp_rows(M), [1000.0 + np.log(2.0)])

    def test_very_negative_entries_do_not_underflow(self):
        M = np.array([[-1000.0, -1000.0]])
        out = logsumexp_rows(M)
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [-1000.0 + np.log(2.0)])

    def test_shift_equivariance(self):
        M = SeededRng(4).generator.standard_normal((5, 7))
        for c in (-300.0, 0.37, 25.0):
            np.testing.assert_allclose(logsumexp_rows(M + c), logsumexp_rows(M) + c, atol=1e-12, rtol=0)
            np.testing.assert_allclose(logsumexp_cols(M + c), logsumexp_cols(M) + c, atol=1e-12, rtol=0)

    def test_entries_of_magnitude_1e6(self):
        M = np.array([[1e6, -1e6], [-1e6, -1e6]])
        rows = logsumexp_rows(M)
        cols = logsumexp_cols(M)
        assert np.isfinite(rows).all() and np.isfinite(cols).all()
        np.testing.assert_allclose(rows, [1e6, -1e6 + np.log(2.0)])
        np.testing.assert_allclose(cols, [1e6, -1e6 + np.log(2.0)])

    def test_lengths(self):
        M = np.zeros((3, 5))
        assert logsumexp_rows(M).shape == (3,)
        assert logsumexp_cols(M).shape == (5,)


# ════════════════════════════════════════════════════════════════
# SeededRng / gaussian_sample
# ════════════════════════════════════════════════════════════════


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = SeededRng(7).generator.standard_normal(10)
        b = SeededRng(7).generator.standard_normal(10)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = SeededRng(1).generator.standard_normal(10)
        b = SeededRng(2).generator.standard_normal(10)
        assert not np.array_equal(a, b)

    def test_split_is_reproducible_and_independent(self):
        first = [r.generator.random() for r in SeededRng(3).split(3)]
        second = [r.generator.random() for r in SeededRng(3).split(3)]
        assert first == second
        assert len(set(first)) == 3

    def test_split_rejects_zero(self):
        with pytest.raises(InvalidParameterError):
            SeededRng(0).split(0)


class TestGaussianSample:
    def test_shape_and_moments(self):
        cloud = gaussian_sample(SeededRng(0), 20_000, 2, mean=[1.0, -2.0], stddev=0.5)
        assert (cloud.n, cloud.d) == (20_000, 2)
        np.testing.assert_allclose(cloud.mean(), [1.0, -2.0], atol=0.02)
        np.testing.assert_allclose(cloud.variance(), [0.25, 0.25], rtol=0.05)

    def test_deterministic(self):
        a = gaussian_sample(SeededRng(5), 4, 3)
        b = gaussian_sample(SeededRng(5), 4, 3)
        np.testing.assert_array_equal(a.points, b.points)

    def test_rejects_bad_arguments(self):
        with pytest.raises(InvalidParameterError):
            gaussian_sample(SeededRng(0), 0, 2)
        with pytest.raises(InvalidParameterError):
            gaussian_sample(SeededRng(0), 3, 2, stddev=0.0)


# ════════════════════════════════════════════════════════════════
# finite_diff_gradient
# ════════════════════════════════════════════════════════════════


class TestFiniteDiffGradient:
    def test_quadratic(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        x = np.array([0.3, -0.7])
        grad = finite_diff_gradient(lambda v: 0.5 * v @ A @ v, x)
        np.testing.assert_allclose(grad, A @ x, rtol=1e-8)

    def test_exp_of_product(self):
        x = np.array([0.3, 0.7])
        grad = finite_diff_gradient(lambda v: float(np.exp(v[0] * v[1])), x, step=1e-5)
        expected = np.exp(0.21) * np.array([0.7, 0.3])
        np.testing.assert_allclose(grad, expected, rtol=1e-7)

    def test_constant_function(self):
        grad = finite_diff_gradient(lambda v: 3.25, np.array([0.5, -2.0, 7.0]))
        np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_keeps_shape_of_point(self):
        grad = finite_diff_gradient(lambda v: float(np.sum(v ** 2)), np.ones((2, 3)))
        assert grad.shape == (2, 3)
        np.testing.assert_allclose(grad, 2.0 * np.ones((2, 3)), rtol=1e-8)

    def test_does_not_modify_point(self):
        x = np.array([1.0, 2.0])
        finite_diff_gradient(lambda v: float(v.sum()), x)
        np.testing.assert_array_equal(x, [1.0, 2.0])

    def test_rejects_non_positive_step(self):
        with pytest.raises(InvalidParameterError):
            finite_diff_gradient(lambda v: 0.0, np.zeros(2), step=0.0)
