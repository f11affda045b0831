"""
Минимальная библиотека плотных тензоров с обратным автодифференцированием.

Все вычисления в float64, раскладка row-major. Операции записываются на активную
ленту (Tape), если хотя бы один вход требует градиента. Лента принадлежит одному
владельцу и активируется через контекстный менеджер:

    with Tape() as tape:
        loss = ...
    grads = backward(tape, loss)
"""

import itertools
import math
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from vitscale.core.exceptions import ContractError, ShapeError

_ids = itertools.count(1)
_active_tape: ContextVar[Optional["Tape"]] = ContextVar("vitscale_tape", default=None)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """Плотный массив float64 с флагом requires_grad"""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if any(dim < 1 for dim in self.data.shape):
            raise ShapeError("размерности тензора должны быть >= 1", self.data.shape)
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() для тензора формы {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Копия данных без связи с лентой"""
        return self.data.copy()

    # арифметика через зарегистрированные операции
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("деление поддерживается только на скаляр")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return select(self, key)

    def __repr__(self) -> str:
        label = f" name='{self.name}'" if self.name else ""
        return (f"Tensor(shape={self.shape}{label}, "
                f"requires_grad={self.requires_grad})")


BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class TapeNode:
    """Одна выполненная операция: входы, выход и правило обратного прохода"""
    op: str
    inputs: Tuple[int, ...]
    output: int
    backward: BackwardRule


class Tape:
    """
    Упорядоченная запись выполненных операций.
    Порядок топологический: входы узла всегда записаны раньше его выхода
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.leaves: Dict[int, Tensor] = {}
        self._produced: set = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _active_tape.reset(self._token)
        self._token = None

    def tracks(self, tensor: Tensor) -> bool:
        """Участвует ли тензор в дифференцировании"""
        return tensor.id in self._produced or tensor.requires_grad

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               rule: BackwardRule) -> None:
        for t in inputs:
            if t.requires_grad and t.id not in self._produced:
                self.leaves.setdefault(t.id, t)
        self.nodes.append(TapeNode(op, tuple(t.id for t in inputs), output.id, rule))
        self._produced.add(output.id)
        output.requires_grad = True

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray,
          rule: BackwardRule) -> Tensor:
    """Создать выход операции и записать его на активную ленту"""
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(op, inputs, out, rule)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Свернуть градиент обратно к форме входа после broadcasting"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: формы не согласуются", a.shape, b.shape) from None


# элементарные операции

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, rule)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, rule)


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "multiply")

    def rule(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _emit("multiply", (a, b), a.data * b.data, rule)


def scale(x: ArrayLike, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _emit("scale", (x,), x.data * factor, lambda g: (g * factor,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    C[..., i, j] = sum_l A[..., i, l] * B[..., l, j].
    Ведущие (batch) размерности согласуются по правилам broadcasting
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul: внутренние размерности не совпадают",
                         a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul: batch-размерности не согласуются",
                         a.shape, b.shape) from None

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), a.data @ b.data, rule)


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: некорректная перестановка {axes}", x.shape)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes),
                 lambda g: (np.transpose(g, inverse),))


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape в {tuple(shape)} невозможен", x.shape) from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def broadcast_to(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to: формы не согласуются", x.shape, shape) from None
    return _emit("broadcast_to", (x,), out, lambda g: (_unbroadcast(g, x.shape),))


def select(x: ArrayLike, key) -> Tensor:
    """Базовый срез (int/slice) без повторяющихся индексов"""
    x = _as_tensor(x)
    out = x.data[key]

    def rule(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _emit("select", (x,), np.array(out, dtype=np.float64), rule)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: пустой список тензоров")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: формы не согласуются",
                         *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tensors, out, rule)


def sum(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), out, rule)


def mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# нелинейности и нормализация

def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Softmax с вычитанием максимума для устойчивости"""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax: ось {axis} вне диапазона для {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), s, rule)


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike,
               eps: float = 1e-6) -> Tensor:
    """Нормализация по последней оси с обучаемыми gain/bias"""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError("layer_norm: gain/bias не совпадают с последней осью",
                         x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        d_gain = (g * xhat).sum(axis=lead)
        d_bias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, d_gain, d_bias

    return _emit("layer_norm", (x, gain, bias), out, rule)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: ArrayLike) -> Tensor:
    """Точная форма x * Phi(x) через функцию ошибок"""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _emit("gelu", (x,), x.data * cdf, lambda g: (g * (cdf + x.data * pdf),))


# функции потерь

def softmax_cross_entropy(logits: ArrayLike, labels: Sequence[int]) -> Tensor:
    """Средняя по батчу кросс-энтропия для меток-индексов"""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy: ожидаются logits [b, k] и метки [b]",
                         logits.shape, labels.shape)
    batch = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def rule(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _emit("softmax_cross_entropy", (logits,), np.array(loss), rule)


def sigmoid_cross_entropy(logits: ArrayLike, targets: ArrayLike) -> Tensor:
    """
    Мульти-лейбл сигмоидная кросс-энтропия: сумма по классам, среднее по батчу
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape or logits.ndim != 2:
        raise ShapeError("sigmoid_cross_entropy: формы logits и targets",
                         logits.shape, targets.shape)
    z = logits.data
    batch = z.shape[0]
    per_entry = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    loss = per_entry.sum() / batch
    probs = 0.5 * (1.0 + np.tanh(0.5 * z))

    def rule(g):
        return ((probs - targets) * (g / batch),)

    return _emit("sigmoid_cross_entropy", (logits,), np.array(loss), rule)


# обратный проход

def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Градиенты скалярного loss по всем листьям ленты с requires_grad.
    Ключ словаря - Tensor.id листа
    """
    if loss.size != 1:
        raise ContractError(
            f"backward ожидает скалярный loss, получена форма {loss.shape}"
        )

    leaves = dict(tape.leaves)
    if loss.id not in tape._produced:
        if not loss.requires_grad:
            raise ContractError("loss не записан на ленту и не требует градиента")
        leaves.setdefault(loss.id, loss)

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        upstream = grads.get(node.output)
        if upstream is None:
            continue
        for input_id, g in zip(node.inputs, node.backward(upstream)):
            if g is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + g
            else:
                grads[input_id] = np.array(g, dtype=np.float64)

    return {
        leaf_id: grads.get(leaf_id, np.zeros_like(leaf.data))
        for leaf_id, leaf in leaves.items()
    }


def grad_check(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]],
               h: float = 1e-5, floor: float = 1e-8) -> float:
    """
    Сравнить backward() с центральными разностями (f(x+h) - f(x-h)) / 2h.
    Возвращает худшую относительную ошибку |a - n| / max(|a|, |n|, floor)
    """
    if h <= 0:
        raise ContractError("шаг h должен быть положительным")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.requires_grad = True

    with Tape() as tape:
        out = f(x)
    analytic = backward(tape, out)

    worst = 0.0
    for t in inputs:
        grad = analytic.get(t.id, np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = f(x).item()
            flat[i] = original - h
            f_minus = f(x).item()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(grad[i]), abs(numeric), floor)
            worst = max(worst, abs(grad[i] - numeric) / denom)
    return worst
