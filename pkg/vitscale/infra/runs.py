"""
Хранилище результатов прогонов: CSV таблицы из приложения, таблица форм моделей,
вычисление compute и файл fit.json
"""

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from vitscale.core.exceptions import (
    ContractError,
    DataFormatError,
    DuplicateRecordError,
    UnknownModelError,
)
from vitscale.core.models import FitReport, RunRecord
from vitscale.core.utils import format_suffixed, parse_suffixed
from vitscale.decorators import log_action

logger = logging.getLogger("vitscale.infra")

RUNS_HEADER = ("model", "data_size", "steps", "metric", "value")
SHAPES_HEADER = ("name", "width", "depth", "mlp", "heads",
                 "params_mio", "gflops_224", "gflops_384")
DEFAULT_BATCH = 4096

# sha256 поставляемых таблиц; правка без обновления суммы должна падать в тестах
BUNDLED_CHECKSUMS = {
    "runs/fewshot.csv":
        "0ab7dff3b8a8734c6546b5783e0a52b213caf4a3bafbf67f55cd48f0bf2f0e9d",
    "runs/finetune.csv":
        "594c02b136eb622901419ea59ce5f998ae2a0d8cbe26dcdadbc9aa8b2acb6a6d",
    "tables/table2.csv":
        "1bc4d272a769e18bb0441870ad860f2528cc5385904994ef94e6b58eea479037",
}


def checksum(path) -> str:
    """sha256 содержимого файла, hex"""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunTable:
    """Записи прогонов с происхождением: путь и контрольная сумма файла"""
    records: List[RunRecord] = field(default_factory=list)
    source: Optional[str] = None
    checksum: Optional[str] = None

    def __post_init__(self):
        seen = set()
        for record in self.records:
            if record.key in seen:
                raise DuplicateRecordError(self.source or "<memory>", record.key)
            seen.add(record.key)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[RunRecord]:
        return iter(self.records)

    def metrics(self) -> List[str]:
        return sorted({r.metric for r in self.records})

    def models(self) -> List[str]:
        return sorted({r.model_name for r in self.records})


def _read_rows(path: Path, header: Sequence[str]) -> Iterator[Tuple[int, List[str]]]:
    """(номер строки, поля) для каждой непустой строки после заголовка"""
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return
    reader = csv.reader(io.StringIO(text))
    first = next(reader)
    if tuple(f.strip() for f in first) != tuple(header):
        raise DataFormatError(path, f"ожидался заголовок {','.join(header)}", line=1)
    for row in reader:
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(
                path, f"ожидалось {len(header)} полей, получено {len(row)}",
                line=reader.line_num,
            )
        yield reader.line_num, [f.strip() for f in row]


@log_action("PARSE_RUNS")
def parse_runs_csv(path) -> RunTable:
    """
    Разобрать CSV model,data_size,steps,metric,value.
    Суффиксы K/M/B раскрываются, точность в процентах переводится в долю ошибок
    """
    path = Path(path)
    records: List[RunRecord] = []
    lines: Dict[tuple, int] = {}
    for line, (model, data_size, steps, metric, value) in _read_rows(path, RUNS_HEADER):
        try:
            record = RunRecord.from_accuracy(
                model_name=model,
                data_size=parse_suffixed(data_size),
                steps=parse_suffixed(steps),
                metric=metric,
                value=float(value),
            )
        except (ValueError, ContractError) as e:
            raise DataFormatError(path, str(e), line=line) from None
        if record.key in lines:
            raise DuplicateRecordError(path, record.key, line=line)
        lines[record.key] = line
        records.append(record)

    table = RunTable(records=records, source=str(path), checksum=checksum(path))
    logger.info(f"Загружено {len(table)} записей из {path}")
    return table


def serialize_runs_csv(table: RunTable, path) -> Path:
    """Записать таблицу в формате parse_runs_csv; запись атомарная"""
    path = Path(path)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(RUNS_HEADER)
    for r in table.records:
        writer.writerow([r.model_name, format_suffixed(r.data_size),
                         format_suffixed(r.steps), r.metric, repr(float(r.accuracy))])
    write_text_atomic(path, buffer.getvalue())
    return path


def write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_suffix(path.suffix + ".tmp")
    try:
        temp_path.write_text(text, encoding="utf-8")
        temp_path.replace(path)
    except Exception:
        if temp_path.exists():
            temp_path.unlink()
        raise


def filter_metric(table: RunTable, metric: str) -> RunTable:
    return RunTable(records=[r for r in table.records if r.metric == metric],
                    source=table.source, checksum=table.checksum)


# таблица форм моделей

@dataclass(frozen=True)
class ShapeRow:
    name: str
    width: int
    depth: int
    mlp: int
    heads: int
    params_mio: float
    gflops_224: float
    gflops_384: float


def load_shape_table(path) -> Dict[str, ShapeRow]:
    """Таблица архитектур: имя -> строка"""
    path = Path(path)
    shapes: Dict[str, ShapeRow] = {}
    for line, fields in _read_rows(path, SHAPES_HEADER):
        name = fields[0]
        try:
            row = ShapeRow(name, *(int(v) for v in fields[1:5]),
                           *(float(v) for v in fields[5:]))
        except ValueError as e:
            raise DataFormatError(path, str(e), line=line) from None
        if name in shapes:
            raise DataFormatError(path, f"повторяющаяся модель '{name}'", line=line)
        shapes[name] = row
    return shapes


def attach_compute(table: RunTable, shapes: Dict[str, ShapeRow],
                   batch: int = DEFAULT_BATCH) -> RunTable:
    """
    compute = steps * batch * GFLOPs(224) * 1e-9, в экзаFLOP.
    Нулевые шаги дают compute 0 и отклоняются RunRecord
    """
    records = []
    for r in table.records:
        row = shapes.get(r.model_name)
        if row is None:
            raise UnknownModelError(r.model_name)
        compute = r.steps * batch * row.gflops_224 * 1e-9
        records.append(replace(r, compute=compute, batch=batch))
    return RunTable(records=records, source=table.source, checksum=table.checksum)


def records_to_points(records) -> List[Tuple[float, float]]:
    points = []
    for r in records:
        if r.compute is None:
            raise ContractError(f"у записи {r.key} не задан compute")
        points.append((r.compute, r.error_rate))
    return points


def fit_to_dict(report: FitReport, frontier) -> dict:
    """Схема fit.json: params, rms, n_points, frontier и служебные поля"""
    return {
        "params": report.params.to_dict(),
        "rms": report.rms_residual,
        "n_points": report.n_points,
        "frontier": [
            {"compute": c, "error": e} for c, e in records_to_points(frontier)
        ],
        "space": report.space,
        "nested_rms": report.nested_rms,
        "converged": report.converged,
        "degenerate": report.degenerate,
    }


def write_fit_json(report: FitReport, frontier, path) -> Path:
    path = Path(path)
    write_text_atomic(path, json.dumps(fit_to_dict(report, frontier), indent=2) + "\n")
    logger.info(f"Результат аппроксимации сохранен: {path}")
    return path


def parse_curve_csv(path) -> List[Tuple[float, ...]]:
    """Прочитать CSV кривой, записанный emit_plot"""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or header[:2] != ["compute", "error"]:
        raise DataFormatError(path, "ожидался заголовок compute,error[,predicted]",
                              line=1)
    rows = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(path, "неверное число полей", line=reader.line_num)
        try:
            rows.append(tuple(float(v) for v in row))
        except ValueError as e:
            raise DataFormatError(path, str(e), line=reader.line_num) from None
    return rows
