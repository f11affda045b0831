from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from vitscale.core.exceptions import (
    ConfigurationError,
    ContractError,
    ShapeError,
    UnknownModelError,
)

HEAD_TYPES = ("CLS", "GAP", "MAP")

# ширина, глубина, MLP, головы для семейств моделей из таблицы архитектур
VARIANTS: Dict[str, Tuple[int, int, int, int]] = {
    "s": (256, 6, 1024, 8),
    "Ti": (192, 12, 768, 3),
    "S": (384, 12, 1536, 6),
    "B": (768, 12, 3072, 12),
    "L": (1024, 24, 4096, 16),
    "g": (1408, 40, 6144, 16),
    "G": (1664, 48, 8192, 16),
}

# синонимы pool_type из конфигов обучения
_HEAD_ALIASES = {"TOK": "CLS", "TOKEN": "CLS", "GAP": "GAP", "MAP": "MAP", "CLS": "CLS"}


def normalize_head_type(value: str) -> str:
    head = _HEAD_ALIASES.get(str(value).strip().upper())
    if head is None:
        raise ConfigurationError(
            f"неизвестный тип головы '{value}' (допустимы: {', '.join(HEAD_TYPES)})"
        )
    return head


@dataclass(frozen=True)
class ShapeConfig:
    """
    Описание архитектуры ViT: ширина, глубина, MLP, головы, патч и разрешение
    """
    width: int
    depth: int
    mlp_width: int
    heads: int
    patch_size: int
    image_res: int = 224
    channels: int = 3
    num_classes: int = 1000
    head_type: str = "MAP"
    map_mlp: bool = False

    def __post_init__(self):
        object.__setattr__(self, "head_type", normalize_head_type(self.head_type))
        positive = {
            "width": self.width, "mlp_width": self.mlp_width, "heads": self.heads,
            "patch_size": self.patch_size, "image_res": self.image_res,
            "channels": self.channels, "num_classes": self.num_classes,
        }
        for name, value in positive.items():
            if int(value) != value or value < 1:
                raise ShapeError(
                    f"{name} должно быть положительным целым, получено {value}"
                )
        # depth = 0 допустим для вырожденных конфигураций
        if int(self.depth) != self.depth or self.depth < 0:
            raise ShapeError(f"depth должно быть >= 0, получено {self.depth}")
        if self.width % self.heads != 0:
            raise ShapeError(
                f"ширина {self.width} не делится на число голов {self.heads}"
            )
        if self.image_res % self.patch_size != 0:
            raise ShapeError(
                f"разрешение {self.image_res} не делится "
                f"на размер патча {self.patch_size}"
            )

    @property
    def grid(self) -> int:
        return self.image_res // self.patch_size

    @property
    def tokens(self) -> int:
        """Число токенов-патчей без class-токена"""
        return self.grid * self.grid

    @property
    def sequence_length(self) -> int:
        return self.tokens + (1 if self.head_type == "CLS" else 0)

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def with_(self, **changes) -> "ShapeConfig":
        return replace(self, **changes)

    @classmethod
    def from_variant(cls, name: str, **overrides) -> "ShapeConfig":
        """Собрать форму по имени модели вида "B/16" (патч берется из имени)"""
        family, _, patch = name.partition("/")
        if family not in VARIANTS or not patch.isdigit():
            raise UnknownModelError(name)
        width, depth, mlp, heads = VARIANTS[family]
        params = dict(width=width, depth=depth, mlp_width=mlp, heads=heads,
                      patch_size=int(patch))
        params.update(overrides)
        if "image_res" not in overrides and 224 % params["patch_size"] != 0:
            # ближайшее кратное патчу разрешение для /32, /48 и т.п.
            params["image_res"] = params["patch_size"] * (224 // params["patch_size"])
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ShapeConfig":
        return cls(**data)


@dataclass
class RunRecord:
    """
    Одно измерение предобучения: модель, объем данных, шаги, метрика, ошибка
    """
    model_name: str
    data_size: int
    steps: int
    metric: str
    error_rate: float
    compute: Optional[float] = None
    # исходное значение точности в процентах, как в таблице
    value: Optional[float] = None
    batch: int = 4096

    def __post_init__(self):
        if not 0.0 <= self.error_rate <= 1.0:
            raise ContractError(f"error_rate вне [0, 1]: {self.error_rate}")
        if self.steps < 0 or self.data_size < 0:
            raise ContractError("steps и data_size должны быть неотрицательными")
        if self.compute is not None and not self.compute > 0:
            raise ContractError(
                f"compute должен быть > 0 для {self.model_name} "
                f"(steps={self.steps}), получено {self.compute}"
            )

    @classmethod
    def from_accuracy(cls, model_name: str, data_size: int, steps: int,
                      metric: str, value: float) -> "RunRecord":
        """Точность в процентах переводится в долю ошибок 1 - value/100"""
        if not 0.0 <= value <= 100.0:
            raise ContractError(f"точность вне [0, 100]: {value}")
        return cls(model_name, data_size, steps, metric,
                   error_rate=1.0 - value / 100.0, value=value)

    @property
    def key(self) -> Tuple[str, int, int, str]:
        return (self.model_name, self.data_size, self.steps, self.metric)

    @property
    def accuracy(self) -> float:
        return self.value if self.value is not None else 100.0 * (1.0 - self.error_rate)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(**data)


@dataclass(frozen=True)
class LawParams:
    """Константы закона E = a (C + d)^(-b) + c"""
    a: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ContractError(f"параметры закона должны быть >= 0: {self}")
        if self.c >= 1.0:
            raise ContractError(f"неустранимая ошибка c должна быть < 1: {self.c}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LawParams":
        return cls(**{k: float(data[k]) for k in ("a", "b", "c", "d")})


@dataclass
class FitReport:
    """Результат аппроксимации закона"""
    params: LawParams
    rms_residual: float
    n_points: int
    restarts_used: int
    converged: bool
    degenerate: bool = False
    space: str = "log"
    nested_rms: Optional[float] = None

    def to_dict(self) -> dict:
        data = asdict(self)
        data["params"] = self.params.to_dict()
        return data


@dataclass
class FeatureSet:
    """Матрица признаков n x dim с метками классов"""
    X: np.ndarray
    y: np.ndarray
    class_count: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ShapeError("FeatureSet: ожидается X [n, dim] и y [n]",
                             self.X.shape, self.y.shape)
        if self.X.shape[0] < 1:
            raise ContractError("FeatureSet должен содержать хотя бы один пример")
        if self.y.min() < 0 or self.y.max() >= self.class_count:
            raise ContractError(
                f"метки вне диапазона [0, {self.class_count})"
            )

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.class_count)

    def one_hot(self) -> np.ndarray:
        return np.eye(self.class_count)[self.y]

    def subset(self, indices) -> "FeatureSet":
        indices = np.asarray(indices, dtype=np.int64)
        return FeatureSet(self.X[indices], self.y[indices], self.class_count)


@dataclass
class MemoryBreakdown:
    """Байты по статьям для одного режима оптимизатора"""
    mode: str
    params_bytes: float
    optimizer_bytes: float
    grad_bytes: float
    activation_bytes: float
    total_bytes: float
    budget_bytes: float
    fits: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CostReport:
    """Параметры, FLOPs, токены и память для одной формы"""
    body_params: int
    head_params: int
    macs: int
    flops: int
    tokens: int
    padded_tokens: int
    res: int
    memory: Dict[str, MemoryBreakdown] = field(default_factory=dict)

    def __post_init__(self):
        if self.flops != 2 * self.macs:
            raise ContractError("flops должно равняться 2 * macs")

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def to_dict(self) -> dict:
        data = asdict(self)
        data["gflops"] = self.gflops
        data["memory"] = {mode: m.to_dict() for mode, m in self.memory.items()}
        return data
