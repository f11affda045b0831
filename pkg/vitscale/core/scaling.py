"""
Закон с двойным насыщением E = a (C + d)^(-b) + c: аппроксимация, прогноз и
Парето-фронт качества относительно вычислений
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from vitscale.core.exceptions import ArityError, ConfigurationError, ContractError
from vitscale.core.models import FitReport, LawParams
from vitscale.decorators import log_action

MIN_POINTS = 4
SPACES = ("log", "linear")

Point = Tuple[float, float]


@dataclass(frozen=True)
class FitOptions:
    space: str = "log"
    frontier_only: bool = False
    seed: int = 0
    # дополнительные случайные старты вокруг сетки
    random_starts: int = 0
    max_rounds: int = 10
    max_iter: int = 20_000
    xatol: float = 1e-12
    fatol: float = 1e-20
    b_grid: Tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(1, 11))
    threads: Optional[int] = None

    def __post_init__(self):
        if self.space not in SPACES:
            raise ConfigurationError(f"неизвестное пространство '{self.space}'")
        if self.max_rounds < 1 or self.max_iter < 1:
            raise ConfigurationError("max_rounds и max_iter должны быть >= 1")
        if self.random_starts < 0:
            raise ConfigurationError("random_starts должно быть >= 0")


def _point(item) -> Point:
    if hasattr(item, "compute"):
        if item.compute is None:
            raise ContractError(f"у записи {item.key} не задан compute")
        return float(item.compute), float(item.error_rate)
    compute, error = item
    return float(compute), float(error)


def as_points(items: Iterable) -> List[Point]:
    """RunRecord или пары (C, E) -> список пар"""
    return [_point(item) for item in items]


def predict(law: LawParams, compute):
    """E = a (C + d)^(-b) + c; скаляр или массив"""
    compute_arr = np.asarray(compute, dtype=np.float64)
    if np.any(compute_arr < 0):
        raise ContractError("compute должен быть >= 0")
    with np.errstate(divide="ignore"):
        result = law.a * np.power(compute_arr + law.d, -law.b) + law.c
    return float(result) if np.ndim(compute) == 0 else result


def pareto_frontier(records: Sequence) -> list:
    """
    Недоминируемые записи: нет другой с compute <= и error <= (хотя бы одно строго).
    Совпадающие точки сохраняются; результат отсортирован по compute
    """
    if not records:
        raise ContractError("pareto_frontier: пустой набор")
    points = as_points(records)
    order = sorted(range(len(points)), key=lambda i: (points[i][0], points[i][1], i))

    frontier = []
    best_error = math.inf
    best_compute = None
    for i in order:
        compute, error = points[i]
        if error < best_error:
            best_error, best_compute = error, compute
            frontier.append(records[i])
        elif error == best_error and compute == best_compute:
            frontier.append(records[i])
    return frontier


def best_per_compute(items: Iterable) -> List[Point]:
    """Одна точка на значение compute, с наименьшей ошибкой; по возрастанию C"""
    best = {}
    for compute, error in as_points(items):
        if compute not in best or error < best[compute]:
            best[compute] = error
    return sorted(best.items())


def _residuals(law: Tuple[float, float, float, float], C: np.ndarray,
               E: np.ndarray, space: str) -> np.ndarray:
    a, b, c, d = law
    with np.errstate(all="ignore"):
        pred = a * np.power(C + d, -b) + c
        if space == "log":
            return np.log(pred) - np.log(E)
        return pred - E


def _rms(law, C, E, space) -> float:
    r = _residuals(law, C, E, space)
    value = math.sqrt(float(np.mean(r * r)))
    return value if math.isfinite(value) else math.inf


def nested_fit(points: Sequence, space: str = "log") -> FitReport:
    """
    Чистый степенной закон E = a C^(-b) (c = d = 0): МНК в log-log координатах
    """
    pts = as_points(points)
    if len(pts) < 2:
        raise ArityError(len(pts), 2)
    C = np.array([p[0] for p in pts])
    E = np.array([p[1] for p in pts])
    if np.any(C <= 0) or np.any(E <= 0):
        raise ContractError("вложенная аппроксимация требует C > 0 и E > 0")

    A = np.column_stack([np.ones_like(C), np.log(C)])
    (log_a, slope), *_ = np.linalg.lstsq(A, np.log(E), rcond=None)
    b = -slope
    if b < 0:
        # ошибка растет с вычислениями: лучший монотонный закон - константа
        b, log_a = 0.0, float(np.mean(np.log(E)))
    law = LawParams(a=math.exp(log_a), b=float(b), c=0.0, d=0.0)
    rms = _rms((law.a, law.b, 0.0, 0.0), C, E, space)
    return FitReport(params=law, rms_residual=rms, n_points=len(pts),
                     restarts_used=0, converged=True, space=space, nested_rms=rms)


def _initial_amplitude(b: float, c: float, d: float, C: np.ndarray,
                       E: np.ndarray) -> float:
    """Медиана (E - c) (C + d)^b по точкам с E > c"""
    mask = E > c
    if not np.any(mask):
        return float(np.min(E))
    return float(np.median((E[mask] - c) * np.power(C[mask] + d, b)))


def _starts(C: np.ndarray, E: np.ndarray, nested: LawParams,
            options: FitOptions) -> List[np.ndarray]:
    """Стартовые точки в log-параметризации (log a, log b, log c, log d)"""
    c_floor = 1e-8 * float(np.min(E))
    d_floor = 1e-8 * float(np.min(C))
    starts = []
    for b in options.b_grid:
        for c in (0.0, float(np.min(E)) / 2):
            for d in (0.0, float(np.min(C))):
                a = _initial_amplitude(b, c, d, C, E)
                starts.append(np.log([a, b, max(c, c_floor), max(d, d_floor)]))
    starts.append(np.log([nested.a, max(nested.b, 1e-3), c_floor, d_floor]))

    rng = np.random.default_rng(options.seed)
    for _ in range(options.random_starts):
        base = starts[int(rng.integers(len(starts)))]
        starts.append(base + rng.normal(scale=0.5, size=4))
    return starts


def _refine(theta0: np.ndarray, C: np.ndarray, E: np.ndarray,
            options: FitOptions) -> Tuple[np.ndarray, float, int, bool]:
    """Nelder-Mead с перезапусками, пока улучшение не прекратится"""

    def objective(theta):
        law = np.exp(np.clip(theta, -700.0, 700.0))
        if law[2] >= 1.0:
            return 1e300
        r = _residuals(law, C, E, options.space)
        value = float(np.mean(r * r))
        return value if math.isfinite(value) else 1e300

    theta = np.asarray(theta0, dtype=np.float64)
    best = objective(theta)
    rounds = 0
    converged = False
    for _ in range(options.max_rounds):
        rounds += 1
        result = minimize(objective, theta, method="Nelder-Mead",
                          options=dict(xatol=options.xatol, fatol=options.fatol,
                                       maxiter=options.max_iter,
                                       maxfev=2 * options.max_iter,
                                       adaptive=True))
        converged = bool(result.success)
        improvement = best - result.fun
        if result.fun < best:
            theta, best = result.x, float(result.fun)
        if improvement <= 1e-10 * best + 1e-30:
            break
    return theta, best, rounds, converged


@log_action("FIT_LAW")
def fit_law(points: Sequence, options: Optional[FitOptions] = None) -> FitReport:
    """
    Мультистарт аппроксимация E = a (C + d)^(-b) + c по среднеквадратичному отклонению
    в логарифмическом (по умолчанию) или линейном пространстве ошибок.
    Вложенное решение (c = d = 0) всегда участвует как кандидат
    """
    options = options or FitOptions()
    if options.frontier_only and points:
        # совпадающие точки фронта дают одно наблюдение
        pts = best_per_compute(pareto_frontier(points))
    else:
        pts = as_points(points)
    if len(pts) < MIN_POINTS:
        raise ArityError(len(pts), MIN_POINTS)

    C = np.array([p[0] for p in pts])
    E = np.array([p[1] for p in pts])
    if len(np.unique(C)) != len(C):
        raise ContractError("значения compute должны быть различны")
    if np.any(C <= 0):
        raise ContractError("compute должен быть > 0")
    if np.any(E <= 0) or np.any(E > 1):
        raise ContractError("доля ошибок должна лежать в (0, 1]")

    if np.all(E == E[0]):
        # вырожденный случай: b -> 0, закон константа
        law = LawParams(a=float(E[0]), b=0.0, c=0.0, d=0.0)
        return FitReport(params=law, rms_residual=0.0, n_points=len(pts),
                         restarts_used=0, converged=True, degenerate=True,
                         space=options.space, nested_rms=0.0)

    nested = nested_fit(pts, options.space)
    starts = _starts(C, E, nested.params, options)

    threads = options.threads
    if threads is None:
        from vitscale.infra.settings import thread_count
        threads = thread_count()
    with ThreadPoolExecutor(max_workers=max(1, min(threads, len(starts)))) as pool:
        results = list(pool.map(lambda s: _refine(s, C, E, options), starts))

    candidates = []
    for theta, _, rounds, converged in results:
        a, b, c, d = np.exp(theta)
        if c >= 1.0:
            continue
        law = (float(a), float(b), float(c), float(d))
        candidates.append((_rms(law, C, E, options.space), law, rounds, converged))
    nested_law = nested.params
    candidates.append((nested.rms_residual,
                       (nested_law.a, nested_law.b, 0.0, 0.0), 0, True))

    # минимальный RMS, при равенстве - меньший индекс старта
    best_index = min(range(len(candidates)), key=lambda i: (candidates[i][0], i))
    rms, law, _, converged = candidates[best_index]
    return FitReport(
        params=LawParams(*law),
        rms_residual=rms,
        n_points=len(pts),
        restarts_used=sum(r[2] for r in results),
        converged=converged,
        space=options.space,
        nested_rms=nested.rms_residual,
    )


def fit_curve(report: FitReport, points: Sequence) -> List[Tuple[float, float, float]]:
    """Строки (C, наблюдаемая E, предсказанная E), отсортированные по C"""
    pts = sorted(as_points(points))
    return [(c, e, predict(report.params, c)) for c, e in pts]
