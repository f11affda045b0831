"""
Общие фикстуры: микро-форма модели, детерминированный генератор, изоляция настроек
"""

import os
from pathlib import Path

# файловый лог отключается до первого импорта пакета
os.environ["VTSK_LOG_FILE"] = ""

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from vitscale.core.models import ShapeConfig  # noqa: E402
from vitscale.infra.settings import SettingsLoader  # noqa: E402
from vitscale.training.config import MICRO_SHAPE  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent


# =============================================================================
# Фикстуры
# =============================================================================

@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch):
    """Каждый тест получает свежий SettingsLoader без файлового лога"""
    monkeypatch.setenv("VTSK_LOG_FILE", "")
    monkeypatch.setenv("VTSK_CONFIG", str(ROOT / "tests" / "no-such-config.json"))
    SettingsLoader.reset()
    yield
    SettingsLoader.reset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_shape():
    return ShapeConfig(**MICRO_SHAPE)


@pytest.fixture
def tiny_shape():
    """Форма для поэлементной проверки градиентов всей модели"""
    def build(head_type="MAP", **overrides):
        params = dict(width=8, depth=1, mlp_width=16, heads=2, patch_size=4,
                      image_res=8, channels=2, num_classes=3, head_type=head_type)
        params.update(overrides)
        return ShapeConfig(**params)
    return build


@pytest.fixture
def repo_root():
    return ROOT
