"""
Ядро слоев: свертка, BatchNorm, ReLU, пулинг, линейный слой, функция потерь.

Все backward написаны руками для каждого слоя (без autograd).
Тензоры - numpy массивы, по умолчанию float32; функции сохраняют dtype входа.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from errors import ContractError, DegenerateBatchError, DimensionError, LabelError
from settings import BN_EPSILON, BN_MOMENTUM

DTYPE = np.float32


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


# ==================== TYPES ====================

@dataclass
class BnState:
    """Обучаемые (gamma, beta) и накопленные (running_*) параметры одного BN слоя"""
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def fresh(cls, channels: int, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON,
              dtype=DTYPE) -> "BnState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class ConvCache:
    x_shape: Tuple[int, ...]
    x_pad: np.ndarray
    kernel: np.ndarray
    has_bias: bool
    stride: int
    pad: int
    out_shape: Tuple[int, ...]


@dataclass
class BnCache:
    mode: Mode
    xhat: Optional[np.ndarray]
    inv_std: Optional[np.ndarray]
    gamma: np.ndarray


@dataclass
class LinearCache:
    x: np.ndarray
    weight: np.ndarray


# ==================== CONVOLUTION ====================

def _require_rank(array: np.ndarray, rank: int, what: str) -> None:
    if array.ndim != rank:
        raise DimensionError(f"{what} must be rank {rank}, got shape {tuple(array.shape)}", axis="rank")


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray] = None,
                   stride: int = 1, pad: int = 0) -> Tuple[np.ndarray, ConvCache]:
    """
    Свертка без разворота ядра (cross-correlation) с нулевым паддингом.

    Накопление идет в фиксированном порядке Cin -> kH -> kW, поэтому результат
    совпадает побитово с наивной реализацией на вложенных циклах.
    """
    _require_rank(x, 4, "conv input")
    _require_rank(kernel, 4, "conv kernel")
    n, c_in, h, w = x.shape
    c_out, k_in, k_h, k_w = kernel.shape
    if k_in != c_in:
        raise DimensionError(f"conv Cin mismatch: input has {c_in}, kernel expects {k_in}", axis="Cin")
    if stride < 1 or pad < 0:
        raise DimensionError(f"invalid stride={stride} / pad={pad}", axis="stride")
    if h + 2 * pad < k_h:
        raise DimensionError(f"conv H axis too small: {h}+2*{pad} < {k_h}", axis="H")
    if w + 2 * pad < k_w:
        raise DimensionError(f"conv W axis too small: {w}+2*{pad} < {k_w}", axis="W")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv bias must have shape ({c_out},), got {tuple(bias.shape)}", axis="Cout")

    x_pad = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    h_out = (h + 2 * pad - k_h) // stride + 1
    w_out = (w + 2 * pad - k_w) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out), dtype=x.dtype)

    for ci in range(c_in):
        for i in range(k_h):
            for j in range(k_w):
                window = x_pad[:, ci, i:i + stride * (h_out - 1) + 1:stride, j:j + stride * (w_out - 1) + 1:stride]
                out += window[:, None, :, :] * kernel[None, :, ci, i, j, None, None]
    if bias is not None:
        out += bias[None, :, None, None]

    cache = ConvCache(x.shape, x_pad, kernel, bias is not None, stride, pad, out.shape)
    return out, cache


def conv2d_backward(cache: ConvCache, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    if tuple(grad_out.shape) != tuple(cache.out_shape):
        raise DimensionError(
            f"conv grad shape {tuple(grad_out.shape)} does not match forward output {tuple(cache.out_shape)}",
            axis="grad_out",
        )
    _, c_in, h, w = cache.x_shape
    _, _, k_h, k_w = cache.kernel.shape
    _, _, h_out, w_out = cache.out_shape
    s, p = cache.stride, cache.pad

    grad_pad = np.zeros_like(cache.x_pad)
    grad_kernel = np.zeros_like(cache.kernel)
    for ci in range(c_in):
        for i in range(k_h):
            for j in range(k_w):
                rows = slice(i, i + s * (h_out - 1) + 1, s)
                cols = slice(j, j + s * (w_out - 1) + 1, s)
                window = cache.x_pad[:, ci, rows, cols]
                grad_kernel[:, ci, i, j] = np.einsum("nohw,nhw->o", grad_out, window)
                grad_pad[:, ci, rows, cols] += np.einsum("nohw,o->nhw", grad_out, cache.kernel[:, ci, i, j])

    grad_input = grad_pad[:, :, p:p + h, p:p + w] if p else grad_pad
    grad_bias = grad_out.sum(axis=(0, 2, 3)) if cache.has_bias else None
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


# ==================== BATCH NORM ====================

def batchnorm_forward(x: np.ndarray, state: BnState, mode: Mode,
                      update_running: bool = True) -> Tuple[np.ndarray, BnCache]:
    """
    Train: нормализация по статистикам батча (смещенная дисперсия по N*H*W),
    running <- (1 - momentum) * running + momentum * batch_stat если update_running.
    Eval: нормализация по running статистикам.
    """
    _require_rank(x, 4, "batchnorm input")
    n, c, h, w = x.shape
    for field in ("gamma", "beta", "running_mean", "running_var"):
        if getattr(state, field).shape != (c,):
            raise DimensionError(f"BN {field} must have shape ({c},)", axis="C")

    gamma = state.gamma[None, :, None, None]
    beta = state.beta[None, :, None, None]

    if Mode(mode) == Mode.EVAL:
        inv_std = (1.0 / np.sqrt(state.running_var + x.dtype.type(state.epsilon))).astype(x.dtype)
        xhat = (x - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        return gamma * xhat + beta, BnCache(Mode.EVAL, xhat, inv_std, state.gamma.copy())

    if n * h * w < 2:
        raise DegenerateBatchError(f"BN train mode needs N*H*W >= 2, got {n * h * w}")

    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + x.dtype.type(state.epsilon))).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]
    out = gamma * xhat + beta

    if update_running:
        keep = x.dtype.type(1.0 - state.momentum)
        take = x.dtype.type(state.momentum)
        state.running_mean[...] = keep * state.running_mean + take * mean
        state.running_var[...] = keep * state.running_var + take * var

    return out, BnCache(Mode.TRAIN, xhat, inv_std, state.gamma.copy())


def batchnorm_backward(cache: BnCache, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if cache.mode != Mode.TRAIN:
        raise ContractError("batchnorm_backward is only defined for a Train-mode forward cache")
    if grad_out.shape != cache.xhat.shape:
        raise DimensionError(
            f"BN grad shape {tuple(grad_out.shape)} does not match input {tuple(cache.xhat.shape)}",
            axis="grad_out",
        )
    n, _, h, w = grad_out.shape
    m = grad_out.dtype.type(n * h * w)
    axes = (0, 2, 3)

    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * cache.xhat).sum(axis=axes)

    dxhat = grad_out * cache.gamma[None, :, None, None]
    sum_dxhat = dxhat.sum(axis=axes)[None, :, None, None]
    sum_dxhat_xhat = (dxhat * cache.xhat).sum(axis=axes)[None, :, None, None]
    scale = (cache.inv_std / m)[None, :, None, None]
    grad_input = scale * (m * dxhat - sum_dxhat - cache.xhat * sum_dxhat_xhat)
    return grad_input, grad_gamma, grad_beta


def batchnorm_eval_backward(cache: BnCache, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Обратный проход через BN с фиксированными running статистиками
    (замороженный слой внутри Train прохода): нормализация - аффинная функция входа.
    """
    if cache.mode != Mode.EVAL:
        raise ContractError("batchnorm_eval_backward needs an Eval-statistics forward cache")
    if grad_out.shape != cache.xhat.shape:
        raise DimensionError(
            f"BN grad shape {tuple(grad_out.shape)} does not match input {tuple(cache.xhat.shape)}",
            axis="grad_out",
        )
    axes = (0, 2, 3)
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * cache.xhat).sum(axis=axes)
    grad_input = grad_out * (cache.gamma * cache.inv_std)[None, :, None, None]
    return grad_input, grad_gamma, grad_beta


# ==================== ACTIVATION / POOLING ====================

def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.maximum(x, x.dtype.type(0)), x


def relu_backward(cache: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # градиент в точке 0 равен 0
    if grad_out.shape != cache.shape:
        raise DimensionError("relu grad shape does not match input", axis="grad_out")
    return np.where(cache > 0, grad_out, grad_out.dtype.type(0))


def global_avg_pool_forward(x: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
    _require_rank(x, 4, "pool input")
    if x.shape[2] * x.shape[3] < 1:
        raise DimensionError("global pool needs H*W >= 1", axis="H")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(cache: Tuple[int, ...], grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = cache
    if grad_out.shape != (n, c):
        raise DimensionError("pool grad must have shape [N, C]", axis="grad_out")
    spread = grad_out / grad_out.dtype.type(h * w)
    return np.ascontiguousarray(np.broadcast_to(spread[:, :, None, None], cache))


def avg_downsample_forward(x: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """2x2 среднее с шагом 2"""
    _require_rank(x, 4, "downsample input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"downsample needs even H and W, got {h}x{w}", axis="H" if h % 2 else "W")
    out = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return out, x.shape


def avg_downsample_backward(cache: Tuple[int, ...], grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = cache
    if grad_out.shape != (n, c, h // 2, w // 2):
        raise DimensionError("downsample grad shape mismatch", axis="grad_out")
    quarter = grad_out * grad_out.dtype.type(0.25)
    return np.repeat(np.repeat(quarter, 2, axis=2), 2, axis=3)


# ==================== LINEAR / LOSS ====================

def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, LinearCache]:
    _require_rank(x, 2, "linear input")
    _require_rank(weight, 2, "linear weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear Din mismatch: input {x.shape[1]}, weight {weight.shape[1]}", axis="Din")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear bias must have shape ({weight.shape[0]},)", axis="Dout")
    return x @ weight.T + bias[None, :], LinearCache(x, weight)


def linear_backward(cache: LinearCache, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.shape != (cache.x.shape[0], cache.weight.shape[0]):
        raise DimensionError("linear grad shape mismatch", axis="grad_out")
    return grad_out @ cache.weight, grad_out.T @ cache.x, grad_out.sum(axis=0)


def softmax_cross_entropy(logits: np.ndarray, labels: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Средний -log softmax истинного класса и градиент (softmax - onehot) / N"""
    _require_rank(logits, 2, "logits")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got {labels.shape[0] if labels.ndim else 0}", axis="N")
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        raise LabelError(f"label {int(labels[bad][0])} outside [0, {k})")

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sum_exp)
    loss = float(-log_probs[np.arange(n), labels].mean())

    grad = exp / sum_exp
    grad[np.arange(n), labels] -= 1
    return loss, grad / logits.dtype.type(n)


# ==================== GRADIENT CHECK ====================

def numerical_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-2,
                       indices: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """
    Центральные разности по элементам array (меняется на месте и восстанавливается).
    Реальный шаг берется после округления к dtype массива.
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    targets = indices if indices is not None else list(np.ndindex(array.shape))
    for idx in targets:
        original = array[idx]
        plus = array.dtype.type(original + step)
        minus = array.dtype.type(original - step)
        array[idx] = plus
        f_plus = fn()
        array[idx] = minus
        f_minus = fn()
        array[idx] = original
        grad[idx] = (f_plus - f_minus) / (float(plus) - float(minus))
    return grad


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Максимальная ошибка, нормированная на масштаб градиента"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)
