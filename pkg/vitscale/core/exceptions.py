from typing import Optional, Sequence


class VitScaleError(Exception):
    """Базовое исключение для всех ошибок приложения"""
    pass


class ShapeError(VitScaleError):
    """
    Исключение при несовпадении размерностей тензоров или конфигурации
    """

    def __init__(self, reason: str, *shapes: Sequence[int]):
        self.reason = reason
        self.shapes = [tuple(s) for s in shapes]
        message = f"✗ Ошибка размерности: {reason}"
        if self.shapes:
            message += " (" + " vs ".join(str(s) for s in self.shapes) + ")"
        super().__init__(message)


class ContractError(VitScaleError):
    """Исключение при нарушении предусловия операции"""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"✗ Нарушение контракта: {reason}")


class ConfigurationError(VitScaleError):
    """Исключение при некорректной конфигурации"""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"✗ Некорректная конфигурация: {reason}")


class NonFiniteGradientError(VitScaleError):
    """
    Исключение при NaN/inf в градиенте, шаг оптимизатора отклоняется
    """

    def __init__(self, param_name: Optional[str] = None):
        self.param_name = param_name
        where = f" для параметра '{param_name}'" if param_name else ""
        super().__init__(f"✗ Нечисловой градиент{where}, шаг отклонен")


class DivergenceError(VitScaleError):
    """
    Исключение при расходимости обучения (loss стал NaN)
    """

    def __init__(self, step: int, last_good_step: int):
        self.step = step
        self.last_good_step = last_good_step
        message = (
            f"✗ Обучение разошлось на шаге {step}, "
            f"последний корректный шаг: {last_good_step}"
        )
        super().__init__(message)


class ArityError(VitScaleError):
    """Исключение при недостаточном количестве точек для аппроксимации"""

    def __init__(self, n_points: int, required: int):
        self.n_points = n_points
        self.required = required
        super().__init__(
            f"✗ Недостаточно точек: получено {n_points}, требуется не менее {required}"
        )


class SingularSystemError(VitScaleError):
    """
    Исключение при вырожденной системе нормальных уравнений
    """

    def __init__(self, reason: str = "матрица X^T X вырождена"):
        self.reason = reason
        super().__init__(f"✗ {reason}; используйте регуляризацию lambda > 0")


class InsufficientExamplesError(VitScaleError):
    """
    Исключение при нехватке примеров класса для k-shot выборки
    """

    def __init__(self, class_id: int, available: int, required: int):
        self.class_id = class_id
        self.available = available
        self.required = required
        message = (
            f"✗ Недостаточно примеров класса {class_id}: "
            f"доступно {available}, требуется {required}"
        )
        super().__init__(message)


class DataFormatError(VitScaleError):
    """
    Исключение при некорректных входных данных (CSV, бинарные файлы)
    """

    def __init__(self, path: str, reason: str, line: Optional[int] = None):
        self.path = str(path)
        self.reason = reason
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"✗ Ошибка формата {where}: {reason}")


class DuplicateRecordError(DataFormatError):
    """Исключение при повторе ключа (model, data_size, steps, metric)"""

    def __init__(self, path: str, key: tuple, line: Optional[int] = None):
        self.key = key
        super().__init__(path, f"повторяющийся ключ {key}", line)


class UnknownModelError(VitScaleError):
    """Исключение при ссылке на модель, отсутствующую в таблице форм"""

    def __init__(self, model_name: str):
        self.model_name = model_name
        super().__init__(f"✗ Неизвестная модель '{model_name}'")


class UnknownOptimizerError(VitScaleError):
    """Исключение при неизвестном режиме оптимизатора"""

    def __init__(self, mode: str, supported: Sequence[str] = ()):
        self.mode = mode
        message = f"✗ Неизвестный режим оптимизатора '{mode}'"
        if supported:
            message += f" (поддерживаются: {', '.join(supported)})"
        super().__init__(message)
