import math
from dataclasses import asdict, dataclass, replace
from typing import Iterator, Optional, Tuple

from vitscale.core.exceptions import ConfigurationError, ContractError

DECAY_TYPES = ("linear", "constant", "rsqrt")


@dataclass(frozen=True)
class ScheduleConfig:
    """
    Расписание learning rate: линейный warmup, основная часть и линейный cooldown.
    total_steps=None задает бесконечное расписание без cooldown
    """
    base_lr: float
    warmup_steps: int = 0
    decay_type: str = "rsqrt"
    timescale: int = 10_000
    total_steps: Optional[int] = None
    cooldown_steps: int = 0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigurationError(
                f"base_lr должен быть > 0, получено {self.base_lr}"
            )
        if self.decay_type not in DECAY_TYPES:
            raise ConfigurationError(
                f"неизвестный decay_type '{self.decay_type}' "
                f"(допустимы: {', '.join(DECAY_TYPES)})"
            )
        if self.warmup_steps < 0 or self.cooldown_steps < 0:
            raise ConfigurationError("warmup_steps и cooldown_steps должны быть >= 0")
        if self.decay_type == "rsqrt" and self.timescale < 1:
            raise ConfigurationError("timescale должен быть >= 1")
        if self.total_steps is None:
            if self.cooldown_steps:
                raise ConfigurationError(
                    "cooldown требует конечного total_steps (см. cooldown_branch)"
                )
            if self.decay_type == "linear":
                raise ConfigurationError("linear расписание требует total_steps")
        elif self.warmup_steps + self.cooldown_steps > self.total_steps:
            raise ConfigurationError(
                f"warmup ({self.warmup_steps}) + cooldown ({self.cooldown_steps}) "
                f"больше total_steps ({self.total_steps})"
            )

    @property
    def finite(self) -> bool:
        return self.total_steps is not None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScheduleConfig":
        return cls(**data)


def lr_at(schedule: ScheduleConfig, step: int) -> float:
    """base_lr * warmup * основной множитель * cooldown; после total_steps ноль"""
    if step < 0:
        raise ContractError(f"шаг должен быть >= 0, получено {step}")
    total = schedule.total_steps
    if total is not None and step > total:
        return 0.0

    warmup = 1.0
    if schedule.warmup_steps > 0:
        warmup = min(1.0, step / schedule.warmup_steps)

    if schedule.decay_type == "constant":
        main = 1.0
    elif schedule.decay_type == "rsqrt":
        main = math.sqrt(schedule.timescale / max(step, schedule.timescale))
    else:
        span = total - schedule.warmup_steps
        main = 1.0 if span == 0 else min(1.0, (total - step) / span)

    cooldown = 1.0
    if total is not None and schedule.cooldown_steps > 0:
        cooldown = min(1.0, (total - step) / schedule.cooldown_steps)

    return schedule.base_lr * warmup * main * cooldown


def cooldown_branch(schedule: ScheduleConfig, at_step: int,
                    cooldown_steps: int) -> ScheduleConfig:
    """
    Конечное расписание, в котором cooldown длины cooldown_steps начинается в at_step.
    До at_step совпадает с исходным бесконечным расписанием
    """
    if at_step < schedule.warmup_steps:
        raise ContractError("ветка cooldown не может начинаться до конца warmup")
    if cooldown_steps < 1:
        raise ContractError("cooldown_steps должен быть >= 1")
    return replace(schedule, total_steps=at_step + cooldown_steps,
                   cooldown_steps=cooldown_steps)


def dump_schedule(schedule: ScheduleConfig, every: int = 1,
                  last: Optional[int] = None) -> Iterator[Tuple[int, float]]:
    """Строки (step, lr) от 0 до total_steps (или last) включительно"""
    if every < 1:
        raise ContractError("every должен быть >= 1")
    end = schedule.total_steps if last is None else last
    if end is None:
        raise ContractError("для бесконечного расписания нужен last")
    for step in range(0, end + 1, every):
        yield step, lr_at(schedule, step)
    if end % every:
        yield end, lr_at(schedule, end)
