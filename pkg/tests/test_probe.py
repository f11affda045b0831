"""
Тесты few-shot линейной пробы: k-shot выборка, гребневая регрессия,
предсказания и точность
"""

import numpy as np
import pytest

from vitscale.core.exceptions import (
    ContractError,
    InsufficientExamplesError,
    ShapeError,
    SingularSystemError,
)
from vitscale.core.models import FeatureSet
from vitscale.core.probe import (
    evaluate_probe,
    fit_probe,
    kshot_indices,
    kshot_sample,
    kshot_split,
    normal_equation_residual,
    predict_labels,
    probe_accuracy,
    raw_pixel_features,
    solve_ridge,
)


@pytest.fixture
def clustered(rng):
    """4 класса, 30 примеров на класс, центры далеко друг от друга"""
    centers = rng.standard_normal((4, 6)) * 5
    labels = np.repeat(np.arange(4), 30)
    X = centers[labels] + 0.1 * rng.standard_normal((120, 6))
    return FeatureSet(X, labels, 4)


def gradient_descent_ridge(X, Y, lam, iters=20000):
    """Эталон: минимизация ||XW - Y||^2 + lam ||W||^2 градиентным спуском"""
    W = np.zeros((X.shape[1], Y.shape[1]))
    lipschitz = 2 * (np.linalg.norm(X, 2) ** 2 + lam)
    step = 1.0 / lipschitz
    for _ in range(iters):
        W -= step * (2 * X.T @ (X @ W - Y) + 2 * lam * W)
    return W


# =============================================================================
# k-shot выборка
# =============================================================================

class TestKShot:
    """Ровно k примеров на класс"""

    def test_exactly_k_per_class(self, clustered):
        sample = kshot_sample(clustered, k=5, seed=0)
        assert sample.n == 20
        np.testing.assert_array_equal(sample.class_counts(), [5, 5, 5, 5])

    def test_deterministic_for_seed(self, clustered):
        a = kshot_indices(clustered, k=3, seed=7)
        b = kshot_indices(clustered, k=3, seed=7)
        c = kshot_indices(clustered, k=3, seed=8)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_no_repeats_and_sorted(self, clustered):
        indices = kshot_indices(clustered, k=10, seed=1)
        assert len(set(indices.tolist())) == 40
        assert np.all(np.diff(indices) > 0)

    def test_insufficient_examples_names_class(self):
        features = FeatureSet(np.ones((5, 2)), [0, 0, 0, 1, 1], 2)
        with pytest.raises(InsufficientExamplesError) as info:
            kshot_indices(features, k=3)
        assert info.value.class_id == 1
        assert info.value.available == 2

    def test_k_must_be_positive(self, clustered):
        with pytest.raises(ContractError):
            kshot_indices(clustered, k=0)

    def test_split_disjoint(self, clustered):
        train, test = kshot_split(clustered, k=10, seed=0)
        assert train.n + test.n == clustered.n
        assert test.n == 80

    def test_split_without_rest(self):
        features = FeatureSet(np.eye(2), [0, 1], 2)
        with pytest.raises(ContractError):
            kshot_split(features, k=1)


# =============================================================================
# Гребневая регрессия
# =============================================================================

class TestSolveRidge:
    """Замкнутое решение (X^T X + lambda I)^-1 X^T Y"""

    def test_normal_equations(self, rng):
        X = rng.standard_normal((50, 8))
        Y = np.eye(4)[rng.integers(0, 4, 50)]
        W = solve_ridge(X, Y, 0.1)
        assert normal_equation_residual(X, Y, W, 0.1) < 1e-8

    def test_matches_gradient_descent(self, rng):
        X = rng.standard_normal((50, 8))
        Y = np.eye(4)[rng.integers(0, 4, 50)]
        W = solve_ridge(X, Y, 0.1)
        np.testing.assert_allclose(W, gradient_descent_ridge(X, Y, 0.1), atol=1e-6)

    def test_lambda_zero_full_rank(self, rng):
        X = rng.standard_normal((20, 3))
        Y = rng.standard_normal((20, 2))
        expected, *_ = np.linalg.lstsq(X, Y, rcond=None)
        np.testing.assert_allclose(solve_ridge(X, Y, 0.0), expected, atol=1e-10)

    def test_lambda_zero_singular(self):
        X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        with pytest.raises(SingularSystemError):
            solve_ridge(X, np.ones((3, 1)), 0.0)

    def test_negative_lambda(self, rng):
        with pytest.raises(ContractError):
            solve_ridge(np.ones((3, 2)), np.ones((3, 1)), -1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            solve_ridge(np.ones((3, 2)), np.ones((4, 1)), 1.0)

    def test_duplicated_rows_with_doubled_lambda(self, rng):
        X = rng.standard_normal((30, 6))
        Y = np.eye(3)[rng.integers(0, 3, 30)]
        W = solve_ridge(X, Y, 0.5)
        doubled = solve_ridge(np.vstack([X, X]), np.vstack([Y, Y]), 1.0)
        np.testing.assert_allclose(doubled, W, rtol=1e-10, atol=1e-12)

    def test_norm_shrinks_with_lambda(self, rng):
        X = rng.standard_normal((40, 5))
        Y = np.eye(4)[rng.integers(0, 4, 40)]
        norms = [np.linalg.norm(solve_ridge(X, Y, lam)) for lam in (1.0, 10.0, 100.0)]
        assert norms[0] > norms[1] > norms[2] > 0

    def test_unpenalized_column(self, rng):
        X = np.hstack([rng.standard_normal((30, 2)), np.ones((30, 1))])
        Y = rng.standard_normal((30, 1)) + 5.0
        penalize = np.array([1.0, 1.0, 0.0])
        W = solve_ridge(X, Y, 1e6, penalize=penalize)
        # сильная регуляризация гасит признаки, смещение остается средним
        assert abs(W[2, 0] - Y.mean()) < 1e-3
        assert np.all(np.abs(W[:2]) < 1e-3)


# =============================================================================
# Проба
# =============================================================================

class TestProbe:
    """Обучение, предсказание и точность"""

    def test_separable_clusters(self, clustered):
        assert probe_accuracy(clustered, clustered, k=5, seed=0) == 1.0

    def test_bias_and_standardize(self, clustered):
        train = kshot_sample(clustered, k=5, seed=2)
        probe = fit_probe(train, fit_bias=True, standardize=True)
        assert probe.bias is not None and probe.bias.shape == (4,)
        assert probe.mean is not None
        assert evaluate_probe(probe, clustered) == 1.0

    def test_default_lambda_scales_with_n(self, clustered):
        train = kshot_sample(clustered, k=5, seed=0)
        W = fit_probe(train).W
        expected = solve_ridge(train.X, train.one_hot(), 1e-3 * train.n)
        np.testing.assert_allclose(W, expected)

    def test_accuracy_invariant_to_positive_scale(self, clustered, rng):
        train = kshot_sample(clustered, k=3, seed=4)
        W = solve_ridge(train.X, train.one_hot(), 10.0)
        noisy = FeatureSet(clustered.X + 3.0 * rng.standard_normal(clustered.X.shape),
                           clustered.y, 4)
        expected = evaluate_probe(W, noisy)
        for scale in (1e-3, 0.5, 7.0):
            assert evaluate_probe(scale * W, noisy) == expected

    def test_ties_break_to_lowest_class(self):
        W = np.zeros((2, 3))
        np.testing.assert_array_equal(predict_labels(W, np.ones((4, 2))), [0] * 4)

    def test_dimension_mismatch(self, clustered):
        with pytest.raises(ShapeError):
            evaluate_probe(np.zeros((3, 4)), clustered)

    def test_raw_pixel_features(self, rng):
        images = rng.standard_normal((6, 4, 4, 3))
        features = raw_pixel_features(images, [0, 1, 2, 0, 1, 2], 3)
        assert (features.n, features.dim) == (6, 48)


class TestFeatureSet:
    """Проверки FeatureSet"""

    def test_labels_out_of_range(self):
        with pytest.raises(ContractError):
            FeatureSet(np.ones((2, 2)), [0, 2], 2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            FeatureSet(np.ones((3, 2)), [0, 1], 2)

    def test_one_hot(self):
        features = FeatureSet(np.ones((3, 1)), [1, 0, 1], 2)
        np.testing.assert_array_equal(features.one_hot(), [[0, 1], [1, 0], [0, 1]])
