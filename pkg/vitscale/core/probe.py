"""
Few-shot линейная проба: L2-регуляризованная линейная регрессия на замороженных
признаках с one-hot целями
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import linalg

from vitscale.core.exceptions import (
    ContractError,
    InsufficientExamplesError,
    ShapeError,
    SingularSystemError,
)
from vitscale.core.models import FeatureSet
from vitscale.decorators import log_action

# lambda по умолчанию = DEFAULT_L2_PER_EXAMPLE * n
DEFAULT_L2_PER_EXAMPLE = 1e-3


def kshot_indices(features: FeatureSet, k: int, seed: int = 0) -> np.ndarray:
    """
    Индексы ровно k примеров каждого класса, равномерно без возвращения,
    в порядке исходного набора
    """
    if k < 1:
        raise ContractError(f"k должно быть >= 1, получено {k}")
    rng = np.random.default_rng(seed)
    chosen = []
    for class_id in range(features.class_count):
        indices = np.flatnonzero(features.y == class_id)
        if len(indices) < k:
            raise InsufficientExamplesError(class_id, len(indices), k)
        chosen.append(rng.choice(indices, size=k, replace=False))
    return np.sort(np.concatenate(chosen))


def kshot_sample(features: FeatureSet, k: int, seed: int = 0) -> FeatureSet:
    return features.subset(kshot_indices(features, k, seed))


def kshot_split(features: FeatureSet, k: int, seed: int = 0):
    """(k-shot обучающая выборка, все остальные примеры)"""
    chosen = kshot_indices(features, k, seed)
    rest = np.setdiff1d(np.arange(features.n), chosen)
    if rest.size == 0:
        raise ContractError("после k-shot выборки не осталось тестовых примеров")
    return features.subset(chosen), features.subset(rest)


def solve_ridge(X: np.ndarray, Y: np.ndarray, lam: float,
                penalize: Optional[np.ndarray] = None) -> np.ndarray:
    """
    W = (X^T X + lambda I)^-1 X^T Y через разложение Холецкого.
    penalize - маска столбцов, к которым применяется регуляризация (по умолчанию все)
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if lam < 0:
        raise ContractError(f"lambda должна быть >= 0, получено {lam}")
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError("solve_ridge: ожидаются X [n, dim] и Y [n, classes]",
                         X.shape, Y.shape)

    gram = X.T @ X
    diag = np.ones(X.shape[1]) if penalize is None else np.asarray(penalize, float)
    system = gram + lam * np.diag(diag)
    if lam == 0 and np.linalg.matrix_rank(system) < system.shape[0]:
        raise SingularSystemError()
    try:
        factor = linalg.cho_factor(system)
    except linalg.LinAlgError:
        raise SingularSystemError() from None
    return linalg.cho_solve(factor, X.T @ Y)


def normal_equation_residual(X: np.ndarray, Y: np.ndarray, W: np.ndarray,
                             lam: float) -> float:
    """||(X^T X + lambda I) W - X^T Y|| / ||X^T Y||"""
    rhs = X.T @ Y
    lhs = (X.T @ X + lam * np.eye(X.shape[1])) @ W
    return float(np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs))


@dataclass
class LinearProbe:
    """Веса пробы и параметры предобработки признаков"""
    W: np.ndarray
    bias: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.mean is not None:
            X = (X - self.mean) / self.scale
        return X

    def scores(self, X: np.ndarray) -> np.ndarray:
        out = self.transform(X) @ self.W
        if self.bias is not None:
            out = out + self.bias
        return out


def fit_probe(train: FeatureSet, l2: Optional[float] = None, fit_bias: bool = False,
              standardize: bool = False) -> LinearProbe:
    """
    Обучить пробу на one-hot целях. Смещение (если включено) не регуляризуется
    """
    lam = DEFAULT_L2_PER_EXAMPLE * train.n if l2 is None else l2
    X = train.X
    mean = scale = None
    if standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        X = (X - mean) / scale

    Y = train.one_hot()
    if not fit_bias:
        return LinearProbe(W=solve_ridge(X, Y, lam), mean=mean, scale=scale)

    augmented = np.hstack([X, np.ones((train.n, 1))])
    penalize = np.append(np.ones(X.shape[1]), 0.0)
    solution = solve_ridge(augmented, Y, lam, penalize=penalize)
    return LinearProbe(W=solution[:-1], bias=solution[-1], mean=mean, scale=scale)


def predict_labels(probe: Union[LinearProbe, np.ndarray], X: np.ndarray) -> np.ndarray:
    """argmax по классам, при равенстве - наименьший индекс класса"""
    if isinstance(probe, LinearProbe):
        scores = probe.scores(X)
    else:
        scores = np.asarray(X, dtype=np.float64) @ np.asarray(probe, dtype=np.float64)
    return np.argmax(scores, axis=1)


def evaluate_probe(probe: Union[LinearProbe, np.ndarray], test: FeatureSet) -> float:
    """Доля верных предсказаний на тестовом наборе"""
    W = probe.W if isinstance(probe, LinearProbe) else np.asarray(probe)
    if W.shape[0] != test.dim:
        raise ShapeError("размерность весов не совпадает с признаками",
                         W.shape, test.X.shape)
    return float(np.mean(predict_labels(probe, test.X) == test.y))


@log_action("PROBE")
def probe_accuracy(train: FeatureSet, test: FeatureSet, k: int, seed: int = 0,
                   l2: Optional[float] = None, fit_bias: bool = False,
                   standardize: bool = False) -> float:
    """k-shot выборка из train, обучение пробы, точность на test"""
    shots = kshot_sample(train, k, seed)
    probe = fit_probe(shots, l2=l2, fit_bias=fit_bias, standardize=standardize)
    return evaluate_probe(probe, test)


def raw_pixel_features(images: np.ndarray, labels: np.ndarray,
                       class_count: int) -> FeatureSet:
    """Базовая линия: пиксели изображения как признаки"""
    images = np.asarray(images, dtype=np.float64)
    return FeatureSet(images.reshape(images.shape[0], -1), labels, class_count)
