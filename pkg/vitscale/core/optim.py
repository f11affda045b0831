"""
Механика обучения: Adam (в том числе с моментом в bfloat16), модифицированный
Adafactor, раздельный weight decay для head/body, клиппинг градиентов и Polyak
"""

import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from vitscale.core.exceptions import (
    ConfigurationError,
    ContractError,
    NonFiniteGradientError,
    ShapeError,
    UnknownOptimizerError,
)
from vitscale.core.tensor import Tensor

OPTIMIZER_MODES = ("adam", "adam-hp", "adafactor-mod")

# минимальный показатель нормального числа bfloat16 (как у float32)
_BF16_MIN_EXP = -126
_BF16_MANTISSA_BITS = 7


def bf16_round(x):
    """
    Округление до ближайшего bfloat16 (round-to-nearest-even), результат в float64.
    Работает в float64 без промежуточного float32, поэтому двойного округления нет.
    inf и NaN проходят без изменений, знак нуля сохраняется
    """
    arr = np.asarray(x, dtype=np.float64)
    out = arr.copy()
    finite = np.isfinite(arr)
    if np.any(finite):
        values = arr[finite]
        _, exponent = np.frexp(values)
        # шаг сетки bfloat16 в бинаде значения (субнормальные - фиксированный шаг)
        exponent = np.maximum(exponent - 1, _BF16_MIN_EXP)
        spacing = np.ldexp(1.0, exponent - _BF16_MANTISSA_BITS)
        rounded = np.rint(values / spacing) * spacing
        rounded = np.where(np.abs(rounded) >= 2.0 ** 128,
                           np.copysign(np.inf, values), rounded)
        out[finite] = rounded
    if np.ndim(x) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class OptimConfig:
    beta1: float = 0.9
    beta2_cap: float = 0.999
    beta2_exponent: float = 0.8
    eps_adam: float = 1e-8
    eps_factored: float = 1e-30
    update_clip_threshold: Optional[float] = 1.0
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0:
            raise ConfigurationError(f"beta1 вне [0, 1): {self.beta1}")
        if not 0.0 < self.beta2_cap < 1.0:
            raise ConfigurationError(f"beta2_cap вне (0, 1): {self.beta2_cap}")
        if self.update_clip_threshold is not None and self.update_clip_threshold <= 0:
            raise ConfigurationError("update_clip_threshold должен быть > 0")


def _check_grad(param: np.ndarray, grad: np.ndarray, name: Optional[str]) -> None:
    if param.shape != grad.shape:
        raise ShapeError(f"градиент не совпадает с параметром '{name}'",
                         param.shape, grad.shape)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(name)


@dataclass
class AdamState:
    """Первый и второй моменты Adam; m опционально хранится в bfloat16"""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    momentum_storage: str = "full64"

    @classmethod
    def zeros_like(cls, param: np.ndarray, momentum_storage: str = "full64"):
        if momentum_storage not in ("full64", "bf16"):
            raise ConfigurationError(
                f"неизвестное хранение момента '{momentum_storage}'"
            )
        return cls(np.zeros_like(param, dtype=np.float64),
                   np.zeros_like(param, dtype=np.float64), 0, momentum_storage)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              config: OptimConfig = OptimConfig(), name: Optional[str] = None
              ) -> np.ndarray:
    """
    Шаг Adam с коррекцией смещения. Состояние обновляется на месте,
    возвращается новый параметр
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _check_grad(param, grad, name)

    beta1, beta2 = config.beta1, config.beta2_cap
    state.t += 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    if state.momentum_storage == "bf16":
        m = bf16_round(m)
    state.m = m
    # второй момент всегда в полной точности
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad

    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + config.eps_adam)


def beta2_at(t: int, config: OptimConfig = OptimConfig()) -> float:
    """beta2(t) = min(1 - t^(-0.8), 0.999); t = 1 дает 0"""
    if t < 1:
        raise ContractError("шаг Adafactor начинается с 1")
    return min(1.0 - t ** (-config.beta2_exponent), config.beta2_cap)


@dataclass
class AdafactorState:
    """
    Для матриц (ранг >= 2): аккумуляторы строк R и столбцов C по двум последним осям.
    Для векторов и скаляров: полный второй момент v. Момент m хранится в bfloat16
    """
    m: np.ndarray
    t: int = 0
    row: Optional[np.ndarray] = None
    col: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdafactorState":
        param = np.asarray(param)
        state = cls(m=np.zeros_like(param, dtype=np.float64))
        if param.ndim >= 2:
            state.row = np.zeros(param.shape[:-1])
            state.col = np.zeros(param.shape[:-2] + param.shape[-1:])
        else:
            state.v = np.zeros_like(param, dtype=np.float64)
        return state

    @property
    def factored(self) -> bool:
        return self.row is not None

    def second_moment(self) -> np.ndarray:
        """V = outer(R, C) / sum(R) для матриц, иначе v"""
        if not self.factored:
            return self.v
        total = self.row.sum(axis=-1)[..., None, None]
        return self.row[..., :, None] * self.col[..., None, :] / total


def adafactor_step(param: np.ndarray, grad: np.ndarray, state: AdafactorState,
                   lr: float, config: OptimConfig = OptimConfig(),
                   name: Optional[str] = None) -> np.ndarray:
    """
    Шаг модифицированного Adafactor: без масштабирования lr по норме весов,
    beta2 ограничен 0.999, момент в bfloat16, RMS-клиппинг обновления
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _check_grad(param, grad, name)

    state.t += 1
    beta2 = beta2_at(state.t, config)
    g2 = grad * grad + config.eps_factored
    if state.factored:
        state.row = beta2 * state.row + (1.0 - beta2) * g2.sum(axis=-1)
        state.col = beta2 * state.col + (1.0 - beta2) * g2.sum(axis=-2)
    else:
        state.v = beta2 * state.v + (1.0 - beta2) * g2

    update = grad / np.sqrt(state.second_moment())
    if config.update_clip_threshold is not None:
        rms = math.sqrt(float(np.mean(update * update)))
        update = update / max(1.0, rms / config.update_clip_threshold)

    state.m = bf16_round(config.beta1 * state.m + (1.0 - config.beta1) * update)
    return param - lr * state.m


class Optimizer:
    """
    Набор состояний по именам параметров для одного из режимов:
    adam, adam-hp (момент в bfloat16), adafactor-mod
    """

    def __init__(self, mode: str, config: OptimConfig = OptimConfig()):
        if mode not in OPTIMIZER_MODES:
            raise UnknownOptimizerError(mode, OPTIMIZER_MODES)
        self.mode = mode
        self.config = config
        self.states: Dict[str, Union[AdamState, AdafactorState]] = {}

    def _state_for(self, name: str, param: np.ndarray):
        if name not in self.states:
            if self.mode == "adafactor-mod":
                self.states[name] = AdafactorState.zeros_like(param)
            else:
                storage = "bf16" if self.mode == "adam-hp" else "full64"
                self.states[name] = AdamState.zeros_like(param, storage)
        return self.states[name]

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             lr: float) -> None:
        """Обновить параметры на месте; нечисловой градиент отклоняет весь шаг"""
        for name, grad in grads.items():
            if not np.all(np.isfinite(grad)):
                raise NonFiniteGradientError(name)
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            state = self._state_for(name, param.data)
            if self.mode == "adafactor-mod":
                new = adafactor_step(param.data, grad, state, lr, self.config, name)
            else:
                new = adam_step(param.data, grad, state, lr, self.config, name)
            param.data[...] = new

    def state_nbytes(self) -> int:
        """
        Память состояний при хранении float32 (4 байта) и bfloat16 (2 байта)
        """
        total = 0
        for state in self.states.values():
            if isinstance(state, AdamState):
                m_bytes = 2 if state.momentum_storage == "bf16" else 4
                total += state.m.size * m_bytes + state.v.size * 4
            else:
                total += state.m.size * 2
                if state.factored:
                    total += (state.row.size + state.col.size) * 4
                else:
                    total += state.v.size * 4
        return total


@dataclass(frozen=True)
class WeightDecayRule:
    """Шаблон имени параметра (полное совпадение) и множитель weight decay"""
    pattern: str
    multiplier: float
    _regex: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.multiplier < 0:
            raise ConfigurationError(f"множитель для '{self.pattern}' должен быть >= 0")
        try:
            object.__setattr__(self, "_regex", re.compile(self.pattern))
        except re.error as e:
            raise ConfigurationError(
                f"некорректный шаблон '{self.pattern}': {e}"
            ) from None

    def matches(self, name: str) -> bool:
        return self._regex.fullmatch(name) is not None


# config.wd_mults из конфигурации предобучения
DEFAULT_WD_RULES = (
    WeightDecayRule(r".*head/kernel", 100.0),
    WeightDecayRule(r".*/kernel", 1.0),
)


def parse_wd_rules(pairs: Sequence[Sequence]) -> Tuple[WeightDecayRule, ...]:
    return tuple(WeightDecayRule(str(p), float(m)) for p, m in pairs)


def decay_multiplier(name: str, rules: Sequence[WeightDecayRule]) -> float:
    """Первое совпавшее правило; без совпадения множитель 0"""
    for rule in rules:
        if rule.matches(name):
            return rule.multiplier
    return 0.0


def decay_params(params: Mapping[str, Tensor],
                 rules: Sequence[WeightDecayRule] = DEFAULT_WD_RULES,
                 base_wd: float = 0.0) -> Dict[str, float]:
    """
    Раздельный weight decay после шага оптимизатора: p <- p * (1 - base_wd * mult).
    Возвращает примененные множители сжатия
    """
    if base_wd < 0:
        raise ConfigurationError(f"base_wd должен быть >= 0, получено {base_wd}")
    factors = {}
    for name in params:
        mult = decay_multiplier(name, rules)
        if base_wd * mult >= 1.0:
            raise ConfigurationError(
                f"base_wd * multiplier = {base_wd * mult} >= 1 для '{name}'"
            )
        if mult:
            factors[name] = 1.0 - base_wd * mult
    for name, factor in factors.items():
        params[name].data *= factor
    return factors


def global_norm(grads: Union[Mapping[str, np.ndarray], Sequence[np.ndarray]]) -> float:
    arrays = grads.values() if isinstance(grads, Mapping) else grads
    return math.sqrt(sum(float(np.sum(g * g)) for g in arrays))


def clip_global_norm(grads: Union[Mapping[str, np.ndarray], Sequence[np.ndarray]],
                     max_norm: float):
    """
    Масштабировать все градиенты на max_norm / norm, если совместная норма больше.
    Возвращает (градиенты, исходная норма)
    """
    if max_norm <= 0:
        raise ContractError(f"max_norm должен быть > 0, получено {max_norm}")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteGradientError()
    scale = max_norm / norm if norm > max_norm else 1.0
    if isinstance(grads, Mapping):
        clipped = {name: g * scale for name, g in grads.items()}
    else:
        clipped: List[np.ndarray] = [g * scale for g in grads]
    return clipped, norm


def polyak_update(avg_params: Mapping[str, np.ndarray],
                  params: Mapping[str, Union[np.ndarray, Tensor]],
                  decay: float) -> Dict[str, np.ndarray]:
    """avg <- decay * avg + (1 - decay) * params"""
    if not 0.0 <= decay < 1.0:
        raise ConfigurationError(f"polyak decay вне [0, 1): {decay}")
    updated = {}
    for name, avg in avg_params.items():
        current = params[name]
        current = current.data if isinstance(current, Tensor) else np.asarray(current)
        if current.shape != np.shape(avg):
            raise ShapeError(f"polyak: форма '{name}'", np.shape(avg), current.shape)
        updated[name] = decay * np.asarray(avg) + (1.0 - decay) * current
    return updated
