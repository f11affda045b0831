"""
Вывод кривой качество/вычисления в CSV или SVG (log-log, 800x600)
"""

import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from vitscale.core.exceptions import ContractError
from vitscale.infra.runs import write_text_atomic

logger = logging.getLogger("vitscale.infra")

WIDTH, HEIGHT = 800, 600
MARGIN = 70
FORMATS = ("csv", "svg")


def _normalize(points: Sequence[Sequence[float]]) -> List[Tuple[float, ...]]:
    if not points:
        raise ContractError("emit_plot: нужна хотя бы одна точка")
    rows = [tuple(float(v) for v in p) for p in points]
    arity = {len(r) for r in rows}
    if arity not in ({2}, {3}):
        raise ContractError("точки должны быть (C, E) или (C, E, предсказание)")
    for row in rows:
        if row[0] <= 0 or min(row[1:]) <= 0:
            raise ContractError(f"log-log график требует положительных значений: {row}")
    return sorted(rows)


def render_csv(rows: List[Tuple[float, ...]]) -> str:
    header = "compute,error" + (",predicted" if len(rows[0]) == 3 else "")
    return header + "\n" + "".join(",".join(repr(v) for v in r) + "\n" for r in rows)


def _log_range(values: Sequence[float]) -> Tuple[float, float]:
    lo, hi = math.log10(min(values)), math.log10(max(values))
    if hi - lo < 1e-12:
        # одна точка или одинаковые значения: декада вокруг
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render_svg(rows: List[Tuple[float, ...]], title: str = "") -> str:
    xs = [r[0] for r in rows]
    ys = [v for r in rows for v in r[1:]]
    x_lo, x_hi = _log_range(xs)
    y_lo, y_hi = _log_range(ys)

    def px(x: float) -> float:
        return MARGIN + (math.log10(x) - x_lo) / (x_hi - x_lo) * (WIDTH - 2 * MARGIN)

    def py(y: float) -> float:
        return HEIGHT - MARGIN - (math.log10(y) - y_lo) / (y_hi - y_lo) * (
            HEIGHT - 2 * MARGIN)

    curve_index = 2 if len(rows[0]) == 3 else 1
    polyline = " ".join(f"{px(r[0]):.2f},{py(r[curve_index]):.2f}" for r in rows)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{WIDTH // 2}" y="{HEIGHT - 20}" text-anchor="middle" '
        f'font-size="14">compute (log)</text>',
        f'<text x="20" y="{HEIGHT // 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 20 {HEIGHT // 2})">error rate (log)</text>',
    ]
    if title:
        parts.append(f'<text x="{WIDTH // 2}" y="30" text-anchor="middle" '
                     f'font-size="16">{_escape(title)}</text>')
    parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="2" '
                 f'points="{polyline}"/>')
    for r in rows:
        parts.append(f'<circle cx="{px(r[0]):.2f}" cy="{py(r[1]):.2f}" r="4" '
                     f'fill="darkred"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_plot(points: Sequence[Sequence[float]], path,
              fmt: Optional[str] = None, title: str = "") -> Path:
    """
    Записать точки (C, E[, предсказание]) в CSV или SVG.
    Формат берется из расширения файла, если не задан явно
    """
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in FORMATS:
        raise ContractError(f"неизвестный формат графика '{fmt}' (csv или svg)")
    rows = _normalize(points)
    text = render_csv(rows) if fmt == "csv" else render_svg(rows, title)
    write_text_atomic(path, text)
    logger.info(f"График записан: {path} ({len(rows)} точек, {fmt})")
    return path
