import json
import os
import warnings
from pathlib import Path
from typing import Any, Dict, Optional

from vitscale.core.exceptions import ConfigurationError

ENV_PREFIX = "VTSK_"


class SingletonMeta(type):
    """
    Метакласс для реализации паттерна Singleton.
    Гарантирует, что класс будет иметь только один экземпляр
    """

    _instances: Dict[type, Any] = {}

    def __call__(cls, *args, **kwargs):
        if cls not in cls._instances:
            instance = super().__call__(*args, **kwargs)
            cls._instances[cls] = instance
        return cls._instances[cls]


class SettingsLoader(metaclass=SingletonMeta):
    """
    Singleton для загрузки и кеширования настроек.
    Порядок: значения по умолчанию, затем JSON файл (vitscale.json или путь из
    VTSK_CONFIG), затем переменные окружения VTSK_<KEY>.
    Файлы не создаются, в stdout ничего не печатается
    """

    DEFAULT_CONFIG = {
        # данные
        "SHAPES_FILE": "tables/table2.csv",
        "RUNS_FILE": "runs/fewshot.csv",

        # модель памяти
        "MEMORY_BUDGET_GIB": 16.0,
        "ACT_FACTOR": 8.0,

        # параллелизм (VTSK_THREADS)
        "THREADS": os.cpu_count() or 1,

        # логирование
        "LOG_FILE": "logs/vitscale.log",
        "LOG_LEVEL": "INFO",
        "LOG_FORMAT": "%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        "LOG_MAX_BYTES": 10485760,  # 10 MB
        "LOG_BACKUP_COUNT": 5,
    }

    def __init__(self, config_path: Optional[str] = None):
        if hasattr(self, "_initialized"):
            return

        self._config: Dict[str, Any] = self.DEFAULT_CONFIG.copy()
        path = config_path or os.environ.get(f"{ENV_PREFIX}CONFIG") or "vitscale.json"
        self._config_path = Path(path)

        self._load_from_file()
        self._load_from_env()
        self._initialized = True

    def _load_from_file(self) -> None:
        """Наложить настройки из JSON файла, если он существует"""
        if not self._config_path.exists():
            return
        try:
            with open(self._config_path, "r", encoding="utf-8") as f:
                user_config = json.load(f)
        except (json.JSONDecodeError, OSError) as e:
            warnings.warn(
                f"Не удалось загрузить настройки из {self._config_path}: {e}; "
                "используются значения по умолчанию",
                UserWarning,
            )
            return
        if not isinstance(user_config, dict):
            raise ConfigurationError(f"{self._config_path}: ожидается JSON объект")
        for key, value in user_config.items():
            self._config[key.upper()] = value

    def _load_from_env(self) -> None:
        """Переменные VTSK_<KEY> перекрывают файл и значения по умолчанию"""
        for key, default in self.DEFAULT_CONFIG.items():
            raw = os.environ.get(f"{ENV_PREFIX}{key}")
            if raw is None:
                continue
            self._config[key] = self._coerce(key, raw, default)

    @staticmethod
    def _coerce(key: str, raw: str, default: Any) -> Any:
        # тип берется из значения по умолчанию
        if isinstance(default, str):
            return raw
        try:
            value = type(default)(raw)
        except ValueError:
            raise ConfigurationError(
                f"{ENV_PREFIX}{key}={raw!r}: ожидается {type(default).__name__}"
            ) from None
        if key == "THREADS" and value < 1:
            raise ConfigurationError(f"{ENV_PREFIX}THREADS должно быть >= 1")
        return value

    def get(self, key: str, default: Any = None) -> Any:
        return self._config.get(key, default)

    @classmethod
    def reset(cls) -> None:
        """Сбросить экземпляр, следующий вызов перечитает файл и окружение"""
        SingletonMeta._instances.pop(cls, None)

    def __repr__(self) -> str:
        return (f"SettingsLoader(config_path='{self._config_path}', "
                f"keys={len(self._config)})")


def thread_count() -> int:
    return max(1, int(SettingsLoader().get("THREADS", 1)))
