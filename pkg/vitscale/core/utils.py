from decimal import Decimal, InvalidOperation

GIB = 2 ** 30

# множители суффиксов в таблицах результатов ("400K", "4M", "3B")
SUFFIXES = {"K": 10 ** 3, "M": 10 ** 6, "B": 10 ** 9}


def format_number(value: float, decimals: int = 2):
    """Форматирование числа с разделителями"""
    return f"{value:,.{decimals}f}".replace(",", " ")


def parse_suffixed(text: str) -> int:
    """
    Разобрать количество с суффиксом K/M/B ("1.2M" -> 1200000).
    Результат обязан быть целым, иначе ValueError
    """
    raw = text.strip()
    if not raw:
        raise ValueError("пустое значение")

    multiplier = 1
    if raw[-1].isalpha():
        suffix = raw[-1].upper()
        if suffix not in SUFFIXES:
            raise ValueError(f"неизвестный суффикс '{raw[-1]}'")
        multiplier = SUFFIXES[suffix]
        raw = raw[:-1]

    try:
        amount = Decimal(raw) * multiplier
    except InvalidOperation:
        raise ValueError(f"некорректное число '{text}'") from None
    if amount != amount.to_integral_value() or amount < 0:
        raise ValueError(f"ожидалось неотрицательное целое, получено '{text}'")
    return int(amount)


def format_suffixed(count: int) -> str:
    """Обратное к parse_suffixed: наибольший суффикс с точностью до десятых"""
    for suffix, unit in sorted(SUFFIXES.items(), key=lambda kv: -kv[1]):
        if count >= unit and (count * 10) % unit == 0:
            amount = (Decimal(count * 10 // unit) / 10).normalize()
            return f"{amount:f}{suffix}"
    return str(count)
