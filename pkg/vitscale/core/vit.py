"""
Игрушечный ViT: patch-embedding, pre-LN энкодер и три варианта головы (CLS, GAP, MAP).
Параметры хранятся в плоском словаре с иерархическими именами вида
"block3/attn/qkv/kernel", что позволяет задавать правила weight decay по шаблонам
"""

import math
import re
from typing import Dict, Iterable, Tuple, Union

import numpy as np

from vitscale.core import tensor as T
from vitscale.core.exceptions import ContractError, ShapeError
from vitscale.core.models import ShapeConfig
from vitscale.core.tensor import Tensor

ParamSet = Dict[str, Tensor]

CLASSIFIER_PATTERN = re.compile(r".*head/kernel")
# параметры, не входящие в "тело" модели при подсчете
_HEAD_PREFIXES = ("map/", "head/")

INIT_SCALE = 0.02


def _dense_shapes(shape: ShapeConfig) -> Iterable[Tuple[str, Tuple[int, ...], str]]:
    """
    Порядок параметров (имя, форма, тип инициализации).
    Порядок фиксирован: от него зависит детерминизм init_params
    """
    w, m = shape.width, shape.mlp_width
    yield "embed/kernel", (shape.patch_dim, w), "fan_in"
    yield "embed/bias", (w,), "small"
    if shape.head_type == "CLS":
        yield "cls", (1, 1, w), "small"
    yield "pos_embedding", (shape.sequence_length, w), "small"
    for i in range(shape.depth):
        p = f"block{i}"
        yield f"{p}/ln1/scale", (w,), "ones"
        yield f"{p}/ln1/bias", (w,), "zeros"
        yield f"{p}/attn/qkv/kernel", (w, 3 * w), "fan_in"
        yield f"{p}/attn/qkv/bias", (3 * w,), "small"
        yield f"{p}/attn/out/kernel", (w, w), "fan_in"
        yield f"{p}/attn/out/bias", (w,), "small"
        yield f"{p}/ln2/scale", (w,), "ones"
        yield f"{p}/ln2/bias", (w,), "zeros"
        yield f"{p}/mlp/fc1/kernel", (w, m), "fan_in"
        yield f"{p}/mlp/fc1/bias", (m,), "small"
        yield f"{p}/mlp/fc2/kernel", (m, w), "fan_in"
        yield f"{p}/mlp/fc2/bias", (w,), "small"
    yield "encoder_norm/scale", (w,), "ones"
    yield "encoder_norm/bias", (w,), "zeros"
    if shape.head_type == "MAP":
        yield "map/query", (1, w), "small"
        yield "map/q/kernel", (w, w), "fan_in"
        yield "map/q/bias", (w,), "small"
        yield "map/kv/kernel", (w, 2 * w), "fan_in"
        yield "map/kv/bias", (2 * w,), "small"
        yield "map/out/kernel", (w, w), "fan_in"
        yield "map/out/bias", (w,), "small"
        if shape.map_mlp:
            yield "map/ln/scale", (w,), "ones"
            yield "map/ln/bias", (w,), "zeros"
            yield "map/mlp/fc1/kernel", (w, m), "fan_in"
            yield "map/mlp/fc1/bias", (m,), "small"
            yield "map/mlp/fc2/kernel", (m, w), "fan_in"
            yield "map/mlp/fc2/bias", (w,), "small"
    yield "head/kernel", (w, shape.num_classes), "zeros"
    yield "head/bias", (shape.num_classes,), "zeros"


def init_params(shape: ShapeConfig, seed: int = 0, head_bias: float = 0.0) -> ParamSet:
    """
    Инициализировать параметры модели.
    Ядра линейных слоев ~ N(0, 1/fan_in), смещения и эмбеддинги ~ 0.02 * N(0, 1),
    ядро классификатора нулевое
    """
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for name, dims, kind in _dense_shapes(shape):
        if kind == "fan_in":
            data = rng.standard_normal(dims) / math.sqrt(dims[0])
        elif kind == "small":
            data = INIT_SCALE * rng.standard_normal(dims)
        elif kind == "ones":
            data = np.ones(dims)
        else:
            data = np.zeros(dims)
        params[name] = Tensor(data, requires_grad=True, name=name)
    if head_bias:
        params["head/bias"].data[...] = head_bias
    validate_params(params)
    return params


def validate_params(params: ParamSet) -> None:
    """Ровно один параметр классификатора и только конечные значения"""
    matches = [n for n in params if CLASSIFIER_PATTERN.fullmatch(n)]
    if len(matches) != 1:
        raise ContractError(f"ожидался один параметр классификатора, найдено {matches}")
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            raise ContractError(f"параметр '{name}' содержит нечисловые значения")


def is_body_param(name: str) -> bool:
    return not name.startswith(_HEAD_PREFIXES)


def count_param_elements(params: ParamSet, scope: str = "body") -> int:
    """Число скалярных параметров в области body, head или all"""
    if scope == "all":
        names = params
    elif scope == "body":
        names = [n for n in params if is_body_param(n)]
    elif scope == "head":
        names = [n for n in params if not is_body_param(n)]
    else:
        raise ContractError(f"неизвестная область '{scope}'")
    return int(sum(params[n].size for n in names))


def clone_params(params: ParamSet, requires_grad: bool = True) -> ParamSet:
    return {
        name: Tensor(p.data.copy(), requires_grad=requires_grad, name=name)
        for name, p in params.items()
    }


def patchify(images: Union[Tensor, np.ndarray], patch_size: int) -> Tensor:
    """
    [b, res, res, c] -> [b, (res/p)^2, p*p*c].
    Патчи в растровом порядке, внутри патча пиксели построчно, затем каналы
    """
    images = images if isinstance(images, Tensor) else Tensor(images)
    if images.ndim != 4 or images.shape[1] != images.shape[2]:
        raise ShapeError("patchify ожидает квадратные изображения [b, res, res, c]",
                         images.shape)
    b, res, _, c = images.shape
    if res % patch_size != 0:
        raise ShapeError(f"разрешение {res} не делится на патч {patch_size}",
                         images.shape)
    n = res // patch_size
    x = T.reshape(images, (b, n, patch_size, n, patch_size, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b, n * n, patch_size * patch_size * c))


def dense(x: Tensor, params: ParamSet, prefix: str) -> Tensor:
    return T.matmul(x, params[f"{prefix}/kernel"]) + params[f"{prefix}/bias"]


def _norm(x: Tensor, params: ParamSet, prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}/scale"], params[f"{prefix}/bias"])


def mlp_block(x: Tensor, params: ParamSet, prefix: str) -> Tensor:
    return dense(T.gelu(dense(x, params, f"{prefix}/fc1")), params, f"{prefix}/fc2")


def _split_heads(x: Tensor, parts: int, heads: int) -> Tuple[Tensor, ...]:
    """[b, s, parts*w] -> parts тензоров [b, heads, s, w/heads]"""
    b, s, total = x.shape
    head_dim = total // (parts * heads)
    x = T.reshape(x, (b, s, parts, heads, head_dim))
    x = T.transpose(x, (2, 0, 3, 1, 4))
    return tuple(T.select(x, i) for i in range(parts))


def _merge_heads(x: Tensor) -> Tensor:
    """[b, heads, s, d] -> [b, s, heads*d]"""
    b, h, s, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, h * d))


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    return T.matmul(T.softmax(scores, axis=-1), v)


def self_attention(x: Tensor, params: ParamSet, prefix: str, heads: int) -> Tensor:
    q, k, v = _split_heads(dense(x, params, f"{prefix}/qkv"), 3, heads)
    return dense(_merge_heads(_attend(q, k, v)), params, f"{prefix}/out")


def encoder_block(x: Tensor, params: ParamSet, index: int, heads: int) -> Tensor:
    """Pre-LN блок: x + attn(LN(x)), затем x + mlp(LN(x))"""
    p = f"block{index}"
    x = x + self_attention(_norm(x, params, f"{p}/ln1"), params, f"{p}/attn", heads)
    return x + mlp_block(_norm(x, params, f"{p}/ln2"), params, f"{p}/mlp")


def map_pool(tokens: Tensor, params: ParamSet, heads: int,
             prefix: str = "map", with_mlp: bool = False) -> Tensor:
    """
    Multihead attention pooling: один обучаемый запрос внимания по всем токенам.
    [b, t, w] -> [b, w]
    """
    b, t, w = tokens.shape
    if w % heads != 0:
        raise ShapeError(f"ширина {w} не делится на {heads} голов", tokens.shape)
    head_dim = w // heads

    query = dense(params[f"{prefix}/query"], params, f"{prefix}/q")
    query = T.transpose(T.reshape(query, (1, 1, heads, head_dim)), (0, 2, 1, 3))
    k, v = _split_heads(dense(tokens, params, f"{prefix}/kv"), 2, heads)

    pooled = T.reshape(_merge_heads(_attend(query, k, v)), (b, w))
    pooled = dense(pooled, params, f"{prefix}/out")
    if with_mlp:
        pooled = pooled + mlp_block(_norm(pooled, params, f"{prefix}/ln"),
                                    params, f"{prefix}/mlp")
    return pooled


def check_images(images, shape: ShapeConfig) -> Tensor:
    images = images if isinstance(images, Tensor) else Tensor(images)
    expected = (shape.image_res, shape.image_res, shape.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError("изображения не соответствуют форме модели",
                         images.shape, ("b",) + expected)
    return images


def encode(params: ParamSet, images, shape: ShapeConfig) -> Tensor:
    """Токены после энкодера и финальной нормализации [b, s, w]"""
    images = check_images(images, shape)
    batch = images.shape[0]
    x = dense(patchify(images, shape.patch_size), params, "embed")
    if shape.head_type == "CLS":
        cls = T.broadcast_to(params["cls"], (batch, 1, shape.width))
        x = T.concat([cls, x], axis=1)
    x = x + params["pos_embedding"]
    for i in range(shape.depth):
        x = encoder_block(x, params, i, shape.heads)
    return _norm(x, params, "encoder_norm")


def pool(tokens: Tensor, params: ParamSet, shape: ShapeConfig) -> Tensor:
    if shape.head_type == "CLS":
        return T.select(tokens, (slice(None), 0))
    if shape.head_type == "GAP":
        return T.mean(tokens, axis=1)
    return map_pool(tokens, params, shape.heads, with_mlp=shape.map_mlp)


def forward(params: ParamSet, images, shape: ShapeConfig) -> Tuple[Tensor, Tensor]:
    """
    Прямой проход: (logits [b, classes], features [b, width]).
    Классификатор линейный, без промежуточной нелинейной проекции
    """
    features = pool(encode(params, images, shape), params, shape)
    logits = dense(features, params, "head")
    return logits, features


def loss_fn(params: ParamSet, images, labels, shape: ShapeConfig,
            loss: str = "softmax") -> Tensor:
    """Средний loss по батчу: softmax или сигмоидная кросс-энтропия"""
    logits, _ = forward(params, images, shape)
    if loss == "softmax":
        return T.softmax_cross_entropy(logits, labels)
    if loss == "sigmoid":
        targets = np.eye(shape.num_classes)[np.asarray(labels, dtype=np.int64)]
        return T.sigmoid_cross_entropy(logits, targets)
    raise ContractError(f"неизвестная функция потерь '{loss}'")
