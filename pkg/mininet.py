"""
MiniNet - маленькая CNN по стадиям, настольная замена ResNet/DenseNet.

Стадия: [conv 3x3 -> BN -> ReLU] x blocks_per_stage -> 2x2 average downsample.
Голова: global average pool -> FC.
Имена параметров кодируют стадию и тип: "s3.b0.conv.weight", "s3.b0.bn.gamma", "head.fc.weight".
"""
import itertools
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Mapping, Optional, Set, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

import nn_kernel as nk
from errors import ConfigError, ContractError, DimensionError
from nn_kernel import DTYPE, BnState, Mode
from settings import BN_EPSILON, BN_MOMENTUM

HEAD_PREFIX = "head.fc"
_tokens = itertools.count(1)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    stages: int = Field(4, ge=1)
    blocks_per_stage: int = Field(1, ge=1)
    base_channels: int = Field(8, ge=1)
    num_classes: int = Field(7, ge=1)
    input_size: int = Field(32, ge=1)
    in_channels: int = Field(3, ge=1)
    init_seed: int = Field(0, ge=0, lt=2 ** 64)
    bn_momentum: float = Field(BN_MOMENTUM, gt=0.0, lt=1.0)
    bn_epsilon: float = Field(BN_EPSILON, gt=0.0)

    def validate_architecture(self) -> None:
        if self.input_size % (2 ** self.stages):
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by 2^stages = {2 ** self.stages}"
            )

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * 2 ** (stage - 1)

    @property
    def head_stage(self) -> int:
        return self.stages + 1


class ParamKind(str, Enum):
    CONV_WEIGHT = "ConvWeight"
    CONV_BIAS = "ConvBias"
    BN_GAMMA = "BnGamma"
    BN_BETA = "BnBeta"
    FC_WEIGHT = "FcWeight"
    FC_BIAS = "FcBias"


@dataclass(frozen=True)
class ParamMeta:
    stage: int
    kind: ParamKind


@dataclass(frozen=True)
class BlockSpec:
    stage: int
    block: int
    in_channels: int
    out_channels: int

    @property
    def prefix(self) -> str:
        return f"s{self.stage}.b{self.block}"

    @property
    def conv(self) -> str:
        return f"{self.prefix}.conv"

    @property
    def bn(self) -> str:
        return f"{self.prefix}.bn"


def iter_blocks(config: ModelConfig) -> Iterator[BlockSpec]:
    c_in = config.in_channels
    for stage in range(1, config.stages + 1):
        c_out = config.stage_channels(stage)
        for block in range(config.blocks_per_stage):
            yield BlockSpec(stage, block, c_in, c_out)
            c_in = c_out


def parameter_count(config: ModelConfig) -> int:
    """Число параметров по формуле из форм слоев"""
    total = 0
    for spec in iter_blocks(config):
        total += spec.out_channels * spec.in_channels * 9 + spec.out_channels  # conv
        total += 2 * spec.out_channels  # gamma, beta
    last = config.stage_channels(config.stages)
    return total + last * config.num_classes + config.num_classes


# ==================== MODEL ====================

@dataclass
class Model:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    bn_states: "OrderedDict[str, BnState]"
    param_meta: Dict[str, ParamMeta]
    version: int = 0
    token: int = field(default_factory=lambda: next(_tokens))

    def state_tensors(self) -> "OrderedDict[str, np.ndarray]":
        """Параметры + running статистики BN в порядке определения модели"""
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, value in self.params.items():
            tensors[name] = value
            if name.endswith(".bn.beta"):
                layer = name[: -len(".beta")]
                tensors[f"{layer}.running_mean"] = self.bn_states[layer].running_mean
                tensors[f"{layer}.running_var"] = self.bn_states[layer].running_var
        return tensors

    @property
    def dtype(self):
        return self.params[f"{HEAD_PREFIX}.weight"].dtype


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


def _xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_out, fan_in)).astype(DTYPE)


def build_model(config: ModelConfig) -> Model:
    config.validate_architecture()
    rng = np.random.default_rng(config.init_seed)

    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    bn_states: "OrderedDict[str, BnState]" = OrderedDict()
    meta: Dict[str, ParamMeta] = {}

    for spec in iter_blocks(config):
        params[f"{spec.conv}.weight"] = _he_normal(rng, (spec.out_channels, spec.in_channels, 3, 3), spec.in_channels * 9)
        params[f"{spec.conv}.bias"] = np.zeros(spec.out_channels, dtype=DTYPE)
        state = BnState.fresh(spec.out_channels, config.bn_momentum, config.bn_epsilon)
        params[f"{spec.bn}.gamma"] = state.gamma
        params[f"{spec.bn}.beta"] = state.beta
        bn_states[spec.bn] = state
        meta[f"{spec.conv}.weight"] = ParamMeta(spec.stage, ParamKind.CONV_WEIGHT)
        meta[f"{spec.conv}.bias"] = ParamMeta(spec.stage, ParamKind.CONV_BIAS)
        meta[f"{spec.bn}.gamma"] = ParamMeta(spec.stage, ParamKind.BN_GAMMA)
        meta[f"{spec.bn}.beta"] = ParamMeta(spec.stage, ParamKind.BN_BETA)

    last = config.stage_channels(config.stages)
    params[f"{HEAD_PREFIX}.weight"] = _xavier_uniform(rng, config.num_classes, last)
    params[f"{HEAD_PREFIX}.bias"] = np.zeros(config.num_classes, dtype=DTYPE)
    meta[f"{HEAD_PREFIX}.weight"] = ParamMeta(config.head_stage, ParamKind.FC_WEIGHT)
    meta[f"{HEAD_PREFIX}.bias"] = ParamMeta(config.head_stage, ParamKind.FC_BIAS)

    model = Model(config, params, bn_states, meta)
    logger.debug(f"Built MiniNet: {config.stages} stages, {parameter_count(config)} parameters, seed {config.init_seed}")
    return model


def clone_model(model: Model, dtype=None) -> Model:
    """Глубокая копия; gamma/beta в params и в BnState остаются одним и тем же массивом"""
    dtype = model.dtype if dtype is None else np.dtype(dtype)
    params: "OrderedDict[str, np.ndarray]" = OrderedDict(
        (name, value.astype(dtype, copy=True)) for name, value in model.params.items()
    )
    bn_states: "OrderedDict[str, BnState]" = OrderedDict()
    for layer, state in model.bn_states.items():
        bn_states[layer] = BnState(
            gamma=params[f"{layer}.gamma"],
            beta=params[f"{layer}.beta"],
            running_mean=state.running_mean.astype(dtype, copy=True),
            running_var=state.running_var.astype(dtype, copy=True),
            momentum=state.momentum,
            epsilon=state.epsilon,
        )
    return Model(model.config, params, bn_states, dict(model.param_meta), version=model.version)


def reinit_head(model: Model, num_classes: int, seed: int) -> None:
    """Новая FC голова (Xavier) под другой набор классов, как при переносе ImageNet -> 7 классов"""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))
    last = model.config.stage_channels(model.config.stages)
    model.params[f"{HEAD_PREFIX}.weight"] = _xavier_uniform(rng, num_classes, last).astype(model.dtype)
    model.params[f"{HEAD_PREFIX}.bias"] = np.zeros(num_classes, dtype=model.dtype)
    model.config = model.config.model_copy(update={"num_classes": num_classes})
    model.version += 1
    logger.info(f"Re-initialized FC head for {num_classes} classes")


# ==================== FORWARD / BACKWARD ====================

@dataclass
class ForwardCache:
    token: int
    version: int
    mode: Mode
    batch_shape: Tuple[int, ...]
    steps: List[Tuple[str, Optional[str], object]]


def forward(model: Model, batch: np.ndarray, mode: Mode,
            bn_update: Optional[Mapping[str, bool]] = None,
            bn_frozen: Optional[Mapping[str, bool]] = None) -> Tuple[np.ndarray, ForwardCache]:
    """
    Прямой проход. В Train режиме running статистики BN обновляются только там,
    где bn_update разрешает (по умолчанию - везде). BN слои из bn_frozen
    и в Train режиме нормализуют по running статистикам и их не обновляют.
    """
    cfg = model.config
    if batch.ndim != 4:
        raise DimensionError(f"batch must be [N, C, H, W], got shape {tuple(batch.shape)}", axis="rank")
    if batch.shape[1] != cfg.in_channels:
        raise DimensionError(f"batch has {batch.shape[1]} channels, model expects {cfg.in_channels}", axis="C")
    if batch.shape[2] != cfg.input_size:
        raise DimensionError(f"batch H={batch.shape[2]}, model expects {cfg.input_size}", axis="H")
    if batch.shape[3] != cfg.input_size:
        raise DimensionError(f"batch W={batch.shape[3]}, model expects {cfg.input_size}", axis="W")

    mode = Mode(mode)
    x = batch.astype(model.dtype, copy=False)
    steps: List[Tuple[str, Optional[str], object]] = []

    for spec in iter_blocks(cfg):
        x, c = nk.conv2d_forward(x, model.params[f"{spec.conv}.weight"], model.params[f"{spec.conv}.bias"], 1, 1)
        steps.append(("conv", spec.conv, c))
        bn_mode = Mode.EVAL if bn_frozen and bn_frozen.get(spec.bn, False) else mode
        update = bn_mode == Mode.TRAIN and (bn_update is None or bn_update.get(spec.bn, False))
        x, c = nk.batchnorm_forward(x, model.bn_states[spec.bn], bn_mode, update_running=update)
        steps.append(("bn", spec.bn, c))
        x, c = nk.relu_forward(x)
        steps.append(("relu", None, c))
        if spec.block == cfg.blocks_per_stage - 1:
            x, c = nk.avg_downsample_forward(x)
            steps.append(("down", None, c))

    x, c = nk.global_avg_pool_forward(x)
    steps.append(("pool", None, c))
    logits, c = nk.linear_forward(x, model.params[f"{HEAD_PREFIX}.weight"], model.params[f"{HEAD_PREFIX}.bias"])
    steps.append(("fc", HEAD_PREFIX, c))

    return logits, ForwardCache(model.token, model.version, mode, tuple(batch.shape), steps)


def backward(model: Model, cache: ForwardCache, grad_logits: np.ndarray,
             required: Optional[Set[str]] = None) -> "OrderedDict[str, np.ndarray]":
    """
    Градиенты по всем параметрам (ключи = ключи params).

    required - если задан, обратный проход останавливается после самого
    мелкого слоя с нужным параметром; остальные градиенты остаются нулями.
    """
    if cache.token != model.token or cache.version != model.version:
        raise ContractError("forward cache is stale or belongs to another model")
    if cache.mode != Mode.TRAIN:
        raise ContractError("backward needs a Train-mode forward cache")
    expected = (cache.batch_shape[0], model.config.num_classes)
    if tuple(grad_logits.shape) != expected:
        raise DimensionError(f"grad_logits must have shape {expected}, got {tuple(grad_logits.shape)}", axis="grad_logits")

    grads: "OrderedDict[str, np.ndarray]" = OrderedDict((n, np.zeros_like(p)) for n, p in model.params.items())

    stop = 0
    if required is not None:
        owners = [i for i, (_, layer, _) in enumerate(cache.steps)
                  if layer is not None and any(name.startswith(layer + ".") for name in required)]
        if not owners:
            return grads
        stop = min(owners)

    g = grad_logits
    for index in range(len(cache.steps) - 1, stop - 1, -1):
        kind, layer, c = cache.steps[index]
        if kind == "fc":
            g, grads[f"{layer}.weight"][...], grads[f"{layer}.bias"][...] = nk.linear_backward(c, g)
        elif kind == "pool":
            g = nk.global_avg_pool_backward(c, g)
        elif kind == "down":
            g = nk.avg_downsample_backward(c, g)
        elif kind == "relu":
            g = nk.relu_backward(c, g)
        elif kind == "bn":
            bn_backward = nk.batchnorm_eval_backward if c.mode == Mode.EVAL else nk.batchnorm_backward
            g, grads[f"{layer}.gamma"][...], grads[f"{layer}.beta"][...] = bn_backward(c, g)
        elif kind == "conv":
            g, grads[f"{layer}.weight"][...], grads[f"{layer}.bias"][...] = nk.conv2d_backward(c, g)
    return grads
