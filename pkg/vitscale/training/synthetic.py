"""
Синтетическая задача классификации изображений.
Шаблон класса: знаковый "цвет" по каналам, умноженный на яркость квадрантов
(один яркий квадрант на класс), масштабированный на template_gap
"""

from typing import Tuple

import numpy as np

from vitscale.training.config import SyntheticSpec

DIM_LEVEL = 0.5
BRIGHT_LEVEL = 1.0


def class_templates(spec: SyntheticSpec) -> np.ndarray:
    """[classes, res, res, channels], детерминированно"""
    half = spec.res // 2
    colours = 2 ** spec.channels
    templates = np.empty((spec.classes, spec.res, spec.res, spec.channels))
    for c in range(spec.classes):
        sign = np.array([-1.0 if (c >> ch) & 1 else 1.0 for ch in range(spec.channels)])
        bright = (c + c // colours) % 4
        levels = np.full(4, DIM_LEVEL)
        levels[bright] = BRIGHT_LEVEL
        # квадранты в порядке: верх-лево, верх-право, низ-лево, низ-право
        grid = np.block([
            [np.full((half, half), levels[0]), np.full((half, half), levels[1])],
            [np.full((half, half), levels[2]), np.full((half, half), levels[3])],
        ])
        templates[c] = spec.template_gap * grid[:, :, None] * sign[None, None, :]
    return templates


def gen_synthetic(spec: SyntheticSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Изображения [classes * n_per_class, res, res, channels] и метки.
    Примеры упорядочены по классам; шум N(0, sigma^2) из генератора с seed
    """
    templates = class_templates(spec)
    labels = np.repeat(np.arange(spec.classes), spec.n_per_class)
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal((labels.size, spec.res, spec.res, spec.channels))
    images = templates[labels] + spec.noise * noise
    return images, labels


def nearest_template_accuracy(images: np.ndarray, labels: np.ndarray,
                              templates: np.ndarray) -> float:
    """Оракул: класс ближайшего шаблона по евклидову расстоянию"""
    flat = np.asarray(images).reshape(len(images), -1)
    refs = np.asarray(templates).reshape(len(templates), -1)
    distances = ((flat[:, None, :] - refs[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(distances, axis=1) == np.asarray(labels)))
