import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from vitscale.core import tensor as T
from vitscale.core.exceptions import (
    DivergenceError,
    NonFiniteGradientError,
    ShapeError,
)
from vitscale.core.models import FeatureSet, ShapeConfig
from vitscale.core.optim import (
    Optimizer,
    clip_global_norm,
    decay_params,
    polyak_update,
)
from vitscale.core.schedules import lr_at
from vitscale.core.vit import ParamSet, clone_params, forward, init_params, loss_fn
from vitscale.decorators import log_action
from vitscale.training.config import TrainConfig

logger = logging.getLogger("vitscale.training")

# размер порции при инференсе без градиентов
EVAL_CHUNK = 256


@dataclass
class LogRow:
    step: int
    loss: float
    lr: float
    grad_norm: float


@dataclass
class TrainLog:
    """Журнал обучения: одна строка на шаг"""
    rows: List[LogRow] = field(default_factory=list)
    clipped_steps: List[int] = field(default_factory=list)

    def append(self, row: LogRow) -> None:
        self.rows.append(row)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.rows]

    @property
    def final_loss(self) -> Optional[float]:
        return self.rows[-1].loss if self.rows else None

    def to_csv(self, path) -> None:
        """CSV step,loss,lr,grad_norm; запись атомарная"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["step,loss,lr,grad_norm"]
        lines += [f"{r.step},{r.loss!r},{r.lr!r},{r.grad_norm!r}" for r in self.rows]
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
        tmp.replace(path)


class BatchSampler:
    """Перемешивание с seed; новая перестановка на каждую эпоху"""

    def __init__(self, n: int, batch: int, seed: int):
        self.n = n
        self.batch = min(batch, n)
        self.rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def next(self) -> np.ndarray:
        if self._cursor + self.batch > len(self._order):
            self._order = self.rng.permutation(self.n)
            self._cursor = 0
        indices = self._order[self._cursor:self._cursor + self.batch]
        self._cursor += self.batch
        return indices


class Trainer:
    """
    Координатор обучения на игрушечной задаче.
    Связывает модель, оптимизатор, расписание, weight decay и усреднение Polyak
    """

    def __init__(self, config: TrainConfig, params: Optional[ParamSet] = None):
        """
        Инициализация тренера; без params модель инициализируется по config.seed
        """
        self.config = config
        self.shape = config.shape
        self.params = params if params is not None else init_params(
            config.shape, seed=config.seed, head_bias=config.init_head_bias
        )
        self.optimizer = Optimizer(config.optimizer, config.optim)
        self.averaged: Optional[Dict[str, np.ndarray]] = None
        if config.polyak_decay is not None:
            self.averaged = {n: p.data.copy() for n, p in self.params.items()}
        self.log = TrainLog()
        self._names = {p.id: name for name, p in self.params.items()}

        logger.info(
            f"Trainer инициализирован: optimizer={config.optimizer}, "
            f"head={self.shape.head_type}, steps={config.total_steps}"
        )

    def _check_data(self, images: np.ndarray, labels: np.ndarray) -> None:
        expected = (self.shape.image_res, self.shape.image_res, self.shape.channels)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError("данные не совпадают с формой модели",
                             images.shape, (None,) + expected)
        if labels.shape != (images.shape[0],):
            raise ShapeError("число меток не совпадает с числом изображений",
                             labels.shape, (images.shape[0],))

    def gradients(self, images: np.ndarray,
                  labels: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
        """Loss и градиенты по именам параметров для одного батча"""
        with T.Tape() as tape:
            loss = loss_fn(self.params, images, labels, self.shape,
                           loss=self.config.loss)
        by_id = T.backward(tape, loss)
        grads = {self._names[i]: g for i, g in by_id.items() if i in self._names}
        return loss.item(), grads

    def step(self, step: int, images: np.ndarray, labels: np.ndarray,
             last_good: int) -> LogRow:
        """
        Один шаг: loss -> градиенты -> клиппинг -> оптимизатор -> decay -> Polyak
        """
        config = self.config
        loss, grads = self.gradients(images, labels)
        if not math.isfinite(loss):
            raise DivergenceError(step, last_good)
        try:
            grads, norm = clip_global_norm(grads, config.optim.grad_clip_norm)
        except NonFiniteGradientError:
            raise DivergenceError(step, last_good) from None
        if norm > config.optim.grad_clip_norm:
            self.log.clipped_steps.append(step)

        lr = lr_at(config.schedule, step)
        self.optimizer.step(self.params, grads, lr)
        decay_params(self.params, config.wd_rules, config.base_wd)
        if self.averaged is not None:
            self.averaged = polyak_update(self.averaged, self.params,
                                          config.polyak_decay)
        return LogRow(step=step, loss=loss, lr=lr, grad_norm=norm)

    def run(self, images: np.ndarray, labels: np.ndarray) -> Tuple[ParamSet, TrainLog]:
        """
        Выполнить config.total_steps шагов.
        Возвращает итоговые параметры (усредненные при polyak_decay) и журнал
        """
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        self._check_data(images, labels)
        config = self.config

        logger.info("=" * 70)
        logger.info("Начинается обучение")
        logger.info(f"Форма: {self.shape.to_dict()}")
        logger.info(f"Примеров: {len(labels)}, batch: {config.batch}")
        logger.info("=" * 70)

        started = time.perf_counter()
        sampler = BatchSampler(len(labels), config.batch, config.seed)
        last_good = 0
        for step in range(1, config.total_steps + 1):
            batch = sampler.next()
            row = self.step(step, images[batch], labels[batch], last_good)
            self.log.append(row)
            last_good = step
            if step % config.log_every == 0 or step == config.total_steps:
                logger.info(
                    f"step={row.step} loss={row.loss:.6f} lr={row.lr:.3e} "
                    f"grad_norm={row.grad_norm:.4f}"
                )

        duration = time.perf_counter() - started
        logger.info("=" * 70)
        logger.info(f"Обучение завершено за {duration:.2f}с")
        logger.info(f"Итоговый loss: {self.log.final_loss}")
        logger.info(f"Шагов с клиппингом: {len(self.log.clipped_steps)}")
        logger.info("=" * 70)

        return self.result_params(), self.log

    def result_params(self) -> ParamSet:
        if self.averaged is None:
            return self.params
        return {
            name: T.Tensor(data.copy(), requires_grad=True, name=name)
            for name, data in self.averaged.items()
        }


@log_action("TRAIN")
def train(config: TrainConfig, images: np.ndarray, labels: np.ndarray,
          params: Optional[ParamSet] = None) -> Tuple[ParamSet, TrainLog]:
    """Обучить модель по конфигурации; полностью детерминировано для seed"""
    return Trainer(config, params=params).run(images, labels)


def _frozen(params: ParamSet) -> ParamSet:
    return clone_params(params, requires_grad=False)


def _chunked_forward(params: ParamSet, images: np.ndarray,
                     shape: ShapeConfig) -> Tuple[np.ndarray, np.ndarray]:
    frozen = _frozen(params)
    logits, features = [], []
    for start in range(0, len(images), EVAL_CHUNK):
        chunk = images[start:start + EVAL_CHUNK]
        out_logits, out_features = forward(frozen, chunk, shape)
        logits.append(out_logits.numpy())
        features.append(out_features.numpy())
    return np.concatenate(logits), np.concatenate(features)


@log_action("EXTRACT_FEATURES")
def extract_features(params: ParamSet, images: np.ndarray, shape: ShapeConfig,
                     labels: Optional[np.ndarray] = None) -> FeatureSet:
    """
    Замороженные признаки: выход пулинга после финальной нормализации, без градиентов.
    Без меток все примеры получают класс 0
    """
    images = np.asarray(images, dtype=np.float64)
    _, features = _chunked_forward(params, images, shape)
    if labels is None:
        labels = np.zeros(len(images), dtype=np.int64)
    return FeatureSet(features, labels, shape.num_classes)


def accuracy(params: ParamSet, images: np.ndarray, labels: np.ndarray,
             shape: ShapeConfig) -> float:
    """Доля верных argmax(logits)"""
    logits, _ = _chunked_forward(params, np.asarray(images, dtype=np.float64), shape)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
