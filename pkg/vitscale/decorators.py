import functools
import sys
import time
from typing import Any, Callable

from vitscale.core.exceptions import VitScaleError

# аргументы, которые попадают в строку лога
_LOGGED_KWARGS = ("metric", "mode", "seed", "k", "res", "batch", "space", "path")


def log_action(action_name: str = None):
    """
    Декоратор для логирования доменных операций
    """

    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            from vitscale.logging_config import get_logger
            logger = get_logger("vitscale.actions")

            operation = action_name or func.__name__.upper()
            log_message = operation
            for key in _LOGGED_KWARGS:
                if key in kwargs:
                    log_message += f" {key}={kwargs[key]!r}"

            started = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                elapsed = time.perf_counter() - started
                logger.error(
                    f"{log_message} result=ERROR error={type(e).__name__}:{e} "
                    f"duration={elapsed:.3f}s"
                )
                # пробрасываем дальше
                raise

            elapsed = time.perf_counter() - started
            logger.info(f"{log_message} result=OK duration={elapsed:.3f}s")
            return result

        return wrapper

    return decorator


def handle_command_errors(func):
    """
    Декоратор для обработки ошибок команд CLI: ошибки данных -> код 2
    """
    @functools.wraps(func)
    def wrapper(args):
        try:
            return func(args)
        except VitScaleError as e:
            print(str(e), file=sys.stderr)
            return 2
        except OSError as e:
            print(f"✗ Ошибка ввода-вывода: {e}", file=sys.stderr)
            return 2
    return wrapper
