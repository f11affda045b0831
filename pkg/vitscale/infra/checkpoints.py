"""
Бинарные форматы: чекпоинты VTSK1, файлы признаков VTSF1, загрузчики IDX
"""

import json
import logging
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from vitscale.core.exceptions import DataFormatError
from vitscale.core.models import FeatureSet, ShapeConfig
from vitscale.core.tensor import Tensor
from vitscale.core.vit import ParamSet, validate_params

logger = logging.getLogger("vitscale.infra")

CHECKPOINT_MAGIC = b"VTSK1"
FEATURES_MAGIC = b"VTSF1"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _write_atomic(path: Path, payload: bytes) -> None:
    """Записать файл атомарно через временный"""
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_suffix(path.suffix + ".tmp")
    try:
        temp_path.write_bytes(payload)
        temp_path.replace(path)
    except Exception:
        if temp_path.exists():
            temp_path.unlink()
        raise


def _read(path) -> Tuple[Path, bytes]:
    path = Path(path)
    return path, path.read_bytes()


# чекпоинты

def encode_checkpoint(params: ParamSet, shape: ShapeConfig) -> bytes:
    header = {
        "shape": shape.to_dict(),
        "params": [{"name": name, "dims": list(p.shape)} for name, p in params.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(
        np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in params.values()
    )
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + body


def save_checkpoint(params: ParamSet, shape: ShapeConfig, path) -> Path:
    """
    VTSK1: магия, u32 LE длина заголовка, JSON заголовок, массивы <f4 в его порядке
    """
    path = Path(path)
    _write_atomic(path, encode_checkpoint(params, shape))
    logger.info(f"Чекпоинт сохранен: {path} ({len(params)} параметров)")
    return path


def load_checkpoint(path) -> Tuple[ParamSet, ShapeConfig]:
    path, raw = _read(path)
    prefix = len(CHECKPOINT_MAGIC)
    if raw[:prefix] != CHECKPOINT_MAGIC:
        raise DataFormatError(path, "нет сигнатуры VTSK1")
    if len(raw) < prefix + 4:
        raise DataFormatError(path, "файл обрезан до заголовка")
    (header_len,) = struct.unpack_from("<I", raw, prefix)
    offset = prefix + 4
    try:
        header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
        shape = ShapeConfig.from_dict(header["shape"])
        entries = header["params"]
    except (ValueError, KeyError, TypeError) as e:
        raise DataFormatError(path, f"некорректный заголовок ({e})") from None
    offset += header_len

    params: ParamSet = {}
    for entry in entries:
        dims = tuple(int(d) for d in entry["dims"])
        count = int(np.prod(dims))
        end = offset + 4 * count
        if end > len(raw):
            raise DataFormatError(path, f"данные параметра '{entry['name']}' обрезаны")
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        params[entry["name"]] = Tensor(data.reshape(dims).astype(np.float64),
                                       requires_grad=True, name=entry["name"])
        offset = end
    if offset != len(raw):
        raise DataFormatError(path, f"лишние {len(raw) - offset} байт после данных")
    validate_params(params)
    return params, shape


# признаки

def save_features(features: FeatureSet, path) -> Path:
    """VTSF1: магия, u32 n, u32 dim, n*dim <f4, n <u2 меток"""
    if features.class_count > 0xFFFF:
        raise DataFormatError(path, "метки не помещаются в u16")
    payload = (
        FEATURES_MAGIC
        + struct.pack("<II", features.n, features.dim)
        + np.ascontiguousarray(features.X, dtype="<f4").tobytes()
        + np.ascontiguousarray(features.y, dtype="<u2").tobytes()
    )
    path = Path(path)
    _write_atomic(path, payload)
    logger.info(f"Признаки сохранены: {path} (n={features.n}, dim={features.dim})")
    return path


def load_features(path, class_count: Optional[int] = None) -> FeatureSet:
    """Без class_count число классов равно max(label) + 1"""
    path, raw = _read(path)
    prefix = len(FEATURES_MAGIC)
    if raw[:prefix] != FEATURES_MAGIC:
        raise DataFormatError(path, "нет сигнатуры VTSF1")
    if len(raw) < prefix + 8:
        raise DataFormatError(path, "файл обрезан до заголовка")
    n, dim = struct.unpack_from("<II", raw, prefix)
    offset = prefix + 8
    expected = offset + 4 * n * dim + 2 * n
    if len(raw) != expected:
        raise DataFormatError(path, f"ожидалось {expected} байт, получено {len(raw)}")
    X = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=offset).reshape(n, dim)
    y = np.frombuffer(raw, dtype="<u2", count=n, offset=offset + 4 * n * dim)
    classes = class_count if class_count is not None else int(y.max()) + 1
    return FeatureSet(X.astype(np.float64), y.astype(np.int64), classes)


# IDX

def _idx_header(path: Path, raw: bytes, magic: int, dims: int) -> Tuple[int, ...]:
    if len(raw) < 4 + 4 * dims:
        raise DataFormatError(path, "файл IDX обрезан до заголовка")
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise DataFormatError(
            path, f"магическое число {found:#010x}, ожидалось {magic:#010x}"
        )
    return struct.unpack_from(f">{dims}I", raw, 4)


def load_idx_images(path) -> np.ndarray:
    """IDX u8 изображения [n, rows, cols] -> [n, rows, cols, 1] в [0, 1]"""
    path, raw = _read(path)
    n, rows, cols = _idx_header(path, raw, IDX_IMAGES_MAGIC, 3)
    offset = 16
    if len(raw) != offset + n * rows * cols:
        raise DataFormatError(path, "размер данных не совпадает с заголовком IDX")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=offset)
    return pixels.reshape(n, rows, cols, 1).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    path, raw = _read(path)
    (n,) = _idx_header(path, raw, IDX_LABELS_MAGIC, 1)
    offset = 8
    if len(raw) != offset + n:
        raise DataFormatError(path, "размер данных не совпадает с заголовком IDX")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).astype(np.int64)
