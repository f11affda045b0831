"""
Аналитическая модель стоимости ViT: параметры, FLOPs, паддинг токенов,
память по режимам оптимизатора и перебор форм (shapefind)
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from vitscale.core.exceptions import (
    ConfigurationError,
    ShapeError,
    UnknownOptimizerError,
)
from vitscale.core.models import CostReport, MemoryBreakdown, ShapeConfig
from vitscale.core.utils import GIB
from vitscale.decorators import log_action

PAD_MULTIPLE = 128

OPTIMIZER_MODES = ("adam", "adam-hp", "adafactor-mod")


@dataclass
class MemoryModel:
    """
    Модель памяти: байты на параметр, накладные расходы оптимизатора
    (в долях от памяти параметров) и активации
    """
    bytes_per_param: float = 4.0
    optimizer_factors: Dict[str, float] = field(default_factory=lambda: {
        "adam": 2.0,            # m и v в полной точности
        "adam-hp": 1.5,         # m в bfloat16
        "adafactor-mod": 0.5,   # m в bfloat16, факторизованный v
    })
    grad_factor: float = 1.0
    act_factor: float = 8.0
    budget_bytes: float = 16 * GIB
    # учитывать ли градиенты в проверке fits (в отчете они есть всегда)
    count_gradients: bool = False

    def __post_init__(self):
        factors = [self.bytes_per_param, self.grad_factor, self.act_factor,
                   self.budget_bytes, *self.optimizer_factors.values()]
        if any(f < 0 for f in factors):
            raise ConfigurationError("коэффициенты модели памяти должны быть >= 0")

    @classmethod
    def from_settings(cls, **overrides) -> "MemoryModel":
        from vitscale.infra.settings import SettingsLoader
        settings = SettingsLoader()
        params = dict(
            act_factor=float(settings.get("ACT_FACTOR", 8.0)),
            budget_bytes=float(settings.get("MEMORY_BUDGET_GIB", 16.0)) * GIB,
        )
        params.update(overrides)
        return cls(**params)

    def factor(self, mode: str) -> float:
        if mode not in self.optimizer_factors:
            raise UnknownOptimizerError(mode, tuple(self.optimizer_factors))
        return self.optimizer_factors[mode]


@dataclass(frozen=True)
class GridSpec:
    """Сетка кандидатов для shapefind; патч фиксирован"""
    widths: Tuple[int, ...]
    depths: Tuple[int, ...]
    heads: Tuple[int, ...]
    mlp_widths: Tuple[int, ...]
    patch_size: int = 14

    def __post_init__(self):
        for name in ("widths", "depths", "heads", "mlp_widths"):
            values = tuple(getattr(self, name))
            if not values:
                raise ConfigurationError(f"список {name} в сетке пуст")
            object.__setattr__(self, name, values)

    @classmethod
    def single(cls, shape: ShapeConfig) -> "GridSpec":
        return cls((shape.width,), (shape.depth,), (shape.heads,),
                   (shape.mlp_width,), shape.patch_size)


@dataclass
class ShapefindRow:
    width: int
    depth: int
    mlp_width: int
    heads: int
    patch_size: int
    params: int
    gflops: float
    speed_proxy: float
    fits: Dict[str, bool]
    total_bytes: Dict[str, float]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def padded_count(tokens: int, multiple: int = PAD_MULTIPLE) -> int:
    return math.ceil(tokens / multiple) * multiple


def tokens_and_padding(shape: ShapeConfig, res: Optional[int] = None,
                       with_class_token: Optional[bool] = None) -> Tuple[int, int]:
    """(токены, токены после паддинга до кратного 128); res обязан делиться на патч"""
    res = shape.image_res if res is None else res
    if res % shape.patch_size != 0:
        raise ShapeError(f"разрешение {res} не делится на патч {shape.patch_size}")
    if with_class_token is None:
        with_class_token = shape.head_type == "CLS"
    tokens = (res // shape.patch_size) ** 2 + (1 if with_class_token else 0)
    return tokens, padded_count(tokens)


def valid_tokens(shape: ShapeConfig, res: Optional[int] = None) -> int:
    """Число патчей при VALID-извлечении: floor(res/p) по каждой стороне"""
    res = shape.image_res if res is None else res
    if res < shape.patch_size:
        raise ShapeError(f"разрешение {res} меньше патча {shape.patch_size}")
    return (res // shape.patch_size) ** 2


def padding_overhead(shape: ShapeConfig, res: Optional[int] = None,
                     with_class_token: Optional[bool] = None) -> float:
    """Доля лишних слотов: padded / tokens - 1"""
    tokens, padded = tokens_and_padding(shape, res, with_class_token)
    return padded / tokens - 1.0


def count_params(shape: ShapeConfig) -> Tuple[int, int]:
    """
    (body, head). Тело: patch embedding, позиционные эмбеддинги, блоки,
    финальная норма (и class-токен для CLS). Голова: MAP и классификатор
    """
    w, m = shape.width, shape.mlp_width
    per_block = (3 * (w * w + w)        # qkv
                 + (w * w + w)          # выходная проекция
                 + 2 * w * m + m + w    # MLP
                 + 4 * w)               # две layer norm
    body = (shape.patch_dim * w + w
            + shape.sequence_length * w
            + shape.depth * per_block
            + 2 * w)
    if shape.head_type == "CLS":
        body += w

    head = w * shape.num_classes + shape.num_classes
    if shape.head_type == "MAP":
        head += w + 4 * (w * w + w)     # query, q, kv (2x), out
        if shape.map_mlp:
            head += 2 * w + 2 * w * m + m + w
    return body, head


def count_macs(shape: ShapeConfig, res: Optional[int] = None) -> int:
    """
    Умножения-сложения тела и пулинга; классификатор не учитывается.
    Для res, не кратного патчу, используется VALID-извлечение патчей
    """
    w, m = shape.width, shape.mlp_width
    patches = valid_tokens(shape, res)
    seq = patches + (1 if shape.head_type == "CLS" else 0)

    macs = patches * shape.patch_dim * w
    macs += shape.depth * (4 * seq * w * w + 2 * seq * seq * w + 2 * seq * w * m)
    if shape.head_type == "MAP":
        macs += 2 * seq * w * w + 2 * w * w + 2 * seq * w
        if shape.map_mlp:
            macs += 2 * w * m
    elif shape.head_type == "GAP":
        macs += seq * w
    return macs


def count_flops(shape: ShapeConfig, res: Optional[int] = None) -> int:
    return 2 * count_macs(shape, res)


def memory_for(n_params: int, padded_tokens: int, width: int, depth: int,
               mode: str, batch: int, model: MemoryModel) -> MemoryBreakdown:
    if batch < 1:
        raise ConfigurationError(f"batch должен быть >= 1, получено {batch}")
    params_bytes = n_params * model.bytes_per_param
    optimizer_bytes = params_bytes * model.factor(mode)
    grad_bytes = params_bytes * model.grad_factor
    activation_bytes = batch * padded_tokens * width * depth * model.act_factor
    total = params_bytes + optimizer_bytes + activation_bytes
    if model.count_gradients:
        total += grad_bytes
    return MemoryBreakdown(
        mode=mode,
        params_bytes=params_bytes,
        optimizer_bytes=optimizer_bytes,
        grad_bytes=grad_bytes,
        activation_bytes=activation_bytes,
        total_bytes=total,
        budget_bytes=model.budget_bytes,
        fits=total <= model.budget_bytes,
    )


def memory_report(shape: ShapeConfig, mode: str, batch: int = 1,
                  model: Optional[MemoryModel] = None,
                  res: Optional[int] = None) -> MemoryBreakdown:
    """Разбивка памяти для формы; считаются все параметры (тело и голова)"""
    model = model or MemoryModel()
    body, head = count_params(shape)
    seq = valid_tokens(shape, res) + (1 if shape.head_type == "CLS" else 0)
    return memory_for(body + head, padded_count(seq), shape.width, shape.depth,
                      mode, batch, model)


def cost_report(shape: ShapeConfig, res: Optional[int] = None, batch: int = 1,
                modes: Sequence[str] = OPTIMIZER_MODES,
                model: Optional[MemoryModel] = None) -> CostReport:
    res = shape.image_res if res is None else res
    body, head = count_params(shape)
    macs = count_macs(shape, res)
    tokens = valid_tokens(shape, res) + (1 if shape.head_type == "CLS" else 0)
    return CostReport(
        body_params=body,
        head_params=head,
        macs=macs,
        flops=2 * macs,
        tokens=tokens,
        padded_tokens=padded_count(tokens),
        res=res,
        memory={mode: memory_report(shape, mode, batch, model, res) for mode in modes},
    )


@log_action("SHAPEFIND")
def shapefind(grid: GridSpec, res: int = 224, batch: int = 1,
              budget_bytes: Optional[float] = None,
              modes: Sequence[str] = OPTIMIZER_MODES,
              model: Optional[MemoryModel] = None,
              num_classes: int = 1000, head_type: str = "MAP") -> List[ShapefindRow]:
    """
    Перебрать все комбинации сетки: признак fits по режимам и speed proxy = 1/FLOPs.
    Комбинации с шириной, не кратной числу голов, пропускаются.
    Результат отсортирован по (depth, width, mlp_width, heads)
    """
    model = model or MemoryModel()
    if budget_bytes is not None:
        model = MemoryModel(**{**model.__dict__, "budget_bytes": budget_bytes})

    rows = []
    combos = itertools.product(grid.depths, grid.widths, grid.mlp_widths, grid.heads)
    for depth, width, mlp, heads in sorted(set(combos)):
        if width % heads != 0:
            continue
        shape = ShapeConfig(width=width, depth=depth, mlp_width=mlp, heads=heads,
                            patch_size=grid.patch_size,
                            image_res=grid.patch_size * (res // grid.patch_size),
                            num_classes=num_classes, head_type=head_type)
        flops = count_flops(shape, res)
        reports = {
            mode: memory_report(shape, mode, batch, model, res) for mode in modes
        }
        body, head = count_params(shape)
        rows.append(ShapefindRow(
            width=width, depth=depth, mlp_width=mlp, heads=heads,
            patch_size=grid.patch_size,
            params=body + head,
            gflops=flops / 1e9,
            speed_proxy=1.0 / flops,
            fits={mode: r.fits for mode, r in reports.items()},
            total_bytes={mode: r.total_bytes for mode, r in reports.items()},
        ))
    return rows


# пары с одинаковым числом токенов (рост патча вместе с разрешением)
RESOLUTION_PATCH_PAIRS = (
    ("B/32", 224), ("B/48", 336), ("B/64", 448),
    ("S/16", 224), ("S/24", 336), ("S/32", 448),
)


def compare_resolution_patch(
    pairs: Sequence[Tuple[str, int]] = RESOLUTION_PATCH_PAIRS,
) -> List[dict]:
    """Токены, параметры и GFLOPs для пар (модель, разрешение)"""
    rows = []
    for name, res in pairs:
        shape = ShapeConfig.from_variant(name, image_res=res)
        tokens, padded = tokens_and_padding(shape, res)
        body, _ = count_params(shape)
        rows.append({
            "model": name,
            "res": res,
            "tokens": tokens,
            "padded_tokens": padded,
            "body_params": body,
            "gflops": count_flops(shape, res) / 1e9,
        })
    return rows
