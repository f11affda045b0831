import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from vitscale.core.exceptions import ConfigurationError, UnknownOptimizerError
from vitscale.core.models import ShapeConfig
from vitscale.core.optim import (
    DEFAULT_WD_RULES,
    OPTIMIZER_MODES,
    OptimConfig,
    WeightDecayRule,
    parse_wd_rules,
)
from vitscale.core.schedules import ScheduleConfig

LOSSES = ("softmax", "sigmoid")

# микро-форма для обучения на синтетической задаче
MICRO_SHAPE = dict(width=32, depth=2, mlp_width=64, heads=2, patch_size=4,
                   image_res=16, channels=3, num_classes=4)


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Синтетическая задача: шаблон класса (цвет + яркость квадрантов) плюс шум sigma
    """
    res: int = 16
    classes: int = 4
    n_per_class: int = 64
    noise: float = 0.05
    seed: int = 0
    channels: int = 3
    template_gap: float = 1.0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigurationError("классов должно быть >= 2")
        if self.noise < 0:
            raise ConfigurationError("sigma шума должна быть >= 0")
        if self.res < 2 or self.res % 2:
            raise ConfigurationError("разрешение должно быть четным (4 квадранта)")
        if self.n_per_class < 1 or self.channels < 1:
            raise ConfigurationError("n_per_class и channels должны быть >= 1")
        if self.classes > 4 * 2 ** self.channels:
            raise ConfigurationError(
                f"не более {4 * 2 ** self.channels} различимых классов "
                f"для {self.channels} каналов"
            )
        if self.template_gap <= 0:
            raise ConfigurationError("template_gap должен быть > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    """
    Конфигурация обучения, поле за полем повторяющая блок конфигурации предобучения
    """
    shape: ShapeConfig
    schedule: ScheduleConfig
    optimizer: str = "adafactor-mod"
    base_wd: float = 0.0
    wd_rules: Tuple[WeightDecayRule, ...] = DEFAULT_WD_RULES
    batch: int = 32
    total_steps: int = 1000
    seed: int = 0
    polyak_decay: Optional[float] = None
    loss: str = "softmax"
    init_head_bias: float = 0.0
    log_every: int = 100
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.optimizer not in OPTIMIZER_MODES:
            raise UnknownOptimizerError(self.optimizer, OPTIMIZER_MODES)
        if self.batch < 1:
            raise ConfigurationError(f"batch должен быть >= 1, получено {self.batch}")
        if self.total_steps < 0:
            raise ConfigurationError("total_steps должен быть >= 0")
        if self.base_wd < 0:
            raise ConfigurationError("weight decay должен быть >= 0")
        if self.polyak_decay is not None and not 0.0 <= self.polyak_decay < 1.0:
            raise ConfigurationError(f"polyak_decay вне [0, 1): {self.polyak_decay}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"неизвестная функция потерь '{self.loss}'")
        if self.log_every < 1:
            raise ConfigurationError("log_every должен быть >= 1")
        # все правила проверяются заранее, а не на первом шаге
        for rule in self.wd_rules:
            if self.base_wd * rule.multiplier >= 1.0:
                raise ConfigurationError(
                    f"wd * multiplier >= 1 для шаблона '{rule.pattern}'"
                )

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        """
        Разобрать словарь с полями lr, wd, wd_mults, grad_clip_norm, schedule,
        total_steps, batch_size, model, optimizer, seed, polyak_decay, loss,
        init_head_bias, log_every
        """
        known = {"lr", "wd", "wd_mults", "grad_clip_norm", "schedule", "total_steps",
                 "batch_size", "model", "optimizer", "seed", "polyak_decay", "loss",
                 "init_head_bias", "log_every", "data"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(
                f"неизвестные поля конфигурации: {sorted(unknown)}"
            )
        if "lr" not in data:
            raise ConfigurationError("поле 'lr' обязательно")

        total_steps = int(data.get("total_steps", 1000))
        sched = dict(data.get("schedule", {}))
        schedule = ScheduleConfig(
            base_lr=float(data["lr"]),
            warmup_steps=int(sched.get("warmup_steps", 0)),
            decay_type=sched.get("decay_type", "rsqrt"),
            timescale=int(sched.get("timescale", 10_000)),
            total_steps=total_steps,
            cooldown_steps=int(sched.get("cooldown_steps", 0)),
        )
        wd_rules = DEFAULT_WD_RULES
        if "wd_mults" in data:
            wd_rules = parse_wd_rules(data["wd_mults"])

        return cls(
            shape=shape_from_model_block(data.get("model", {})),
            schedule=schedule,
            optimizer=data.get("optimizer", "adafactor-mod"),
            base_wd=float(data.get("wd", 0.0)),
            wd_rules=wd_rules,
            batch=int(data.get("batch_size", 32)),
            total_steps=total_steps,
            seed=int(data.get("seed", 0)),
            polyak_decay=data.get("polyak_decay"),
            loss=data.get("loss", "softmax"),
            init_head_bias=float(data.get("init_head_bias", 0.0)),
            log_every=int(data.get("log_every", 100)),
            optim=OptimConfig(grad_clip_norm=float(data.get("grad_clip_norm", 1.0))),
        )

    def to_dict(self) -> dict:
        return {
            "lr": self.schedule.base_lr,
            "wd": self.base_wd,
            "wd_mults": [[r.pattern, r.multiplier] for r in self.wd_rules],
            "grad_clip_norm": self.optim.grad_clip_norm,
            "schedule": {
                "decay_type": self.schedule.decay_type,
                "timescale": self.schedule.timescale,
                "warmup_steps": self.schedule.warmup_steps,
                "cooldown_steps": self.schedule.cooldown_steps,
            },
            "total_steps": self.total_steps,
            "batch_size": self.batch,
            "model": {
                "width": self.shape.width, "depth": self.shape.depth,
                "mlp": self.shape.mlp_width, "heads": self.shape.heads,
                "patch": self.shape.patch_size, "res": self.shape.image_res,
                "channels": self.shape.channels, "classes": self.shape.num_classes,
                "pool_type": self.shape.head_type.lower(),
                "map_mlp": self.shape.map_mlp,
            },
            "optimizer": self.optimizer,
            "seed": self.seed,
            "polyak_decay": self.polyak_decay,
            "loss": self.loss,
            "init_head_bias": self.init_head_bias,
            "log_every": self.log_every,
        }


_MODEL_KEYS = {"width": "width", "depth": "depth", "mlp": "mlp_width",
               "heads": "heads", "patch": "patch_size", "res": "image_res",
               "channels": "channels", "classes": "num_classes",
               "pool_type": "head_type", "map_mlp": "map_mlp"}


def shape_from_model_block(model: dict) -> ShapeConfig:
    """Блок model: variant ("B/16") либо явные размеры; по умолчанию микро-форма"""
    unknown = set(model) - set(_MODEL_KEYS) - {"variant"}
    if unknown:
        raise ConfigurationError(f"неизвестные поля model: {sorted(unknown)}")
    overrides = {_MODEL_KEYS[k]: v for k, v in model.items() if k != "variant"}
    if "variant" in model:
        return ShapeConfig.from_variant(model["variant"], **overrides)
    return ShapeConfig(**{**MICRO_SHAPE, **overrides})


def load_train_file(path: str) -> Tuple[TrainConfig, Optional[SyntheticSpec]]:
    """Прочитать JSON конфигурацию обучения и необязательный блок data"""
    try:
        with open(Path(path), "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: некорректный JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: ожидается JSON объект")
    config = TrainConfig.from_dict(data)
    spec = None
    if "data" in data:
        block = dict(data["data"])
        block.setdefault("res", config.shape.image_res)
        block.setdefault("classes", config.shape.num_classes)
        block.setdefault("channels", config.shape.channels)
        spec = SyntheticSpec(**block)
    return config, spec
