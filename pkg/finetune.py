"""
Стратегии дообучения (маски заморозки + learning rate по группам) и цикл обучения на Adam.

Группы параметров: CNN (свертки), BN (gamma/beta), FC (голова).
Таблица learning rate:
    scratch      все группы 0.001
    fc           только FC 0.001
    cnn-fc       CNN + FC 0.0001
    bn-fc        BN + FC 0.01
    all-uniform  все группы 0.0001
    diff-lr      BN 0.01, FC 0.001, CNN 0.0001
    partial-bn=S BN стадий из S + FC, 0.01
"""
import csv
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, Optional, Tuple

import numpy as np
from loguru import logger

import nn_kernel as nk
from errors import ClassificationError, ConfigError, ContractError, NumericError, RangeError
from mininet import Model, ParamKind, backward, forward
from nn_kernel import Mode
from synth_data import Dataset


class ParamGroup(str, Enum):
    CNN = "CNN"
    BN = "BN"
    FC = "FC"


class StrategyKind(str, Enum):
    SCRATCH = "scratch"
    FC_ONLY = "fc"
    CNN_FC = "cnn-fc"
    BN_FC = "bn-fc"
    ALL_UNIFORM = "all-uniform"
    DIFFERENTIAL_LR = "diff-lr"
    PARTIAL_BN = "partial-bn"


class BnStatsPolicy(str, Enum):
    """
    Когда обновлять running статистики BN во время обучения.
    coupled: только у слоев с обучаемыми gamma/beta, замороженные слои нормализуют по running статистикам.
    always / never: все слои нормализуют по статистикам батча.
    """
    COUPLED = "coupled"
    ALWAYS = "always"
    NEVER = "never"


_KIND_TO_GROUP = {
    ParamKind.CONV_WEIGHT: ParamGroup.CNN,
    ParamKind.CONV_BIAS: ParamGroup.CNN,
    ParamKind.BN_GAMMA: ParamGroup.BN,
    ParamKind.BN_BETA: ParamGroup.BN,
    ParamKind.FC_WEIGHT: ParamGroup.FC,
    ParamKind.FC_BIAS: ParamGroup.FC,
}

STRATEGY_RATES: Dict[StrategyKind, Dict[ParamGroup, float]] = {
    StrategyKind.SCRATCH: {ParamGroup.CNN: 0.001, ParamGroup.BN: 0.001, ParamGroup.FC: 0.001},
    StrategyKind.FC_ONLY: {ParamGroup.FC: 0.001},
    StrategyKind.CNN_FC: {ParamGroup.CNN: 0.0001, ParamGroup.FC: 0.0001},
    StrategyKind.BN_FC: {ParamGroup.BN: 0.01, ParamGroup.FC: 0.01},
    StrategyKind.ALL_UNIFORM: {ParamGroup.CNN: 0.0001, ParamGroup.BN: 0.0001, ParamGroup.FC: 0.0001},
    StrategyKind.DIFFERENTIAL_LR: {ParamGroup.BN: 0.01, ParamGroup.FC: 0.001, ParamGroup.CNN: 0.0001},
    StrategyKind.PARTIAL_BN: {ParamGroup.BN: 0.01, ParamGroup.FC: 0.01},
}


@dataclass(frozen=True)
class Strategy:
    kind: StrategyKind
    stages: FrozenSet[int] = frozenset()

    def __post_init__(self):
        if self.kind == StrategyKind.PARTIAL_BN and not self.stages:
            raise ConfigError("partial-bn needs a non-empty stage set")
        if self.kind != StrategyKind.PARTIAL_BN and self.stages:
            raise ConfigError(f"strategy {self.kind.value} does not take stages")

    @property
    def name(self) -> str:
        if self.kind == StrategyKind.PARTIAL_BN:
            return f"partial-bn={','.join(str(s) for s in sorted(self.stages))}"
        return self.kind.value

    @property
    def rates(self) -> Dict[ParamGroup, float]:
        return STRATEGY_RATES[self.kind]

    def __str__(self) -> str:
        return self.name


def parse_strategy(text: str) -> Strategy:
    """'diff-lr', 'partial-bn=3,4' и т.д."""
    text = text.strip().lower()
    if text.startswith("partial-bn"):
        _, sep, stages = text.partition("=")
        if not sep or not stages:
            raise ConfigError("partial-bn needs stages, e.g. partial-bn=3,4")
        try:
            parsed = frozenset(int(s) for s in stages.split(",") if s.strip())
        except ValueError as e:
            raise ConfigError(f"bad partial-bn stage list: {stages!r}") from e
        return Strategy(StrategyKind.PARTIAL_BN, parsed)
    try:
        return Strategy(StrategyKind(text))
    except ValueError as e:
        known = ", ".join(k.value for k in StrategyKind if k != StrategyKind.PARTIAL_BN)
        raise ConfigError(f"unknown strategy {text!r} (known: {known}, partial-bn=STAGES)") from e


def classify_params(model: Model) -> Dict[str, ParamGroup]:
    groups = {}
    for name in model.params:
        meta = model.param_meta.get(name)
        if meta is None or meta.kind not in _KIND_TO_GROUP:
            raise ClassificationError(f"cannot classify parameter '{name}'")
        groups[name] = _KIND_TO_GROUP[meta.kind]
    return groups


# ==================== FREEZE PLAN ====================

@dataclass
class FreezePlan:
    strategy: Strategy
    trainable: Dict[str, bool]
    lr: Dict[str, float]
    bn_update_running: Dict[str, bool]
    bn_frozen: Dict[str, bool]

    @property
    def trainable_names(self) -> List[str]:
        return [name for name, flag in self.trainable.items() if flag]


def build_freeze_plan(strategy: Strategy, model: Model,
                      bn_stats: BnStatsPolicy = BnStatsPolicy.COUPLED) -> FreezePlan:
    stage_count = model.config.stages
    if strategy.kind == StrategyKind.PARTIAL_BN:
        outside = sorted(s for s in strategy.stages if not 1 <= s <= stage_count)
        if outside:
            raise RangeError(f"partial-bn stages {outside} outside model stages 1..{stage_count}")

    groups = classify_params(model)
    trainable: Dict[str, bool] = {}
    lr: Dict[str, float] = {}
    for name, group in groups.items():
        rate = strategy.rates.get(group)
        if (rate is not None and strategy.kind == StrategyKind.PARTIAL_BN and group == ParamGroup.BN
                and model.param_meta[name].stage not in strategy.stages):
            rate = None
        trainable[name] = rate is not None
        lr[name] = rate if rate is not None else 0.0

    bn_update, bn_frozen = {}, {}
    for layer in model.bn_states:
        learns = trainable[f"{layer}.gamma"] or trainable[f"{layer}.beta"]
        if bn_stats == BnStatsPolicy.ALWAYS:
            bn_update[layer] = True
        elif bn_stats == BnStatsPolicy.NEVER:
            bn_update[layer] = False
        else:
            bn_update[layer] = learns
        # coupled: замороженный слой работает на running статистиках и в Train
        bn_frozen[layer] = bn_stats == BnStatsPolicy.COUPLED and not learns

    return FreezePlan(strategy, trainable, lr, bn_update, bn_frozen)


def group_learning_rates(plan: FreezePlan, model: Model) -> Tuple[float, float, float]:
    """(lr_cnn, lr_bn, lr_fc) - 0 для полностью замороженной группы"""
    best = {group: 0.0 for group in ParamGroup}
    for name, group in classify_params(model).items():
        best[group] = max(best[group], plan.lr[name])
    return best[ParamGroup.CNN], best[ParamGroup.BN], best[ParamGroup.FC]


# ==================== ADAM ====================

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: Model) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p) for name, p in model.params.items()},
            v={name: np.zeros_like(p) for name, p in model.params.items()},
        )


def adam_step(model: Model, grads: Mapping[str, np.ndarray], plan: FreezePlan, state: AdamState) -> None:
    """Adam с bias correction; замороженные параметры и их моменты не трогаются"""
    if set(grads) != set(model.params):
        raise ContractError("gradient keys do not match parameter keys")
    names = plan.trainable_names
    for name in names:
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for '{name}', step aborted", param_name=name)

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name in names:
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        model.params[name] -= plan.lr[name] * m_hat / (np.sqrt(v_hat) + state.eps)
    model.version += 1


# ==================== TRAIN / EVALUATE ====================

@dataclass
class EpochRecord:
    epoch: int
    strategy: str
    lr_cnn: float
    lr_bn: float
    lr_fc: float
    train_loss: float
    train_acc: float
    test_acc: Optional[float] = None


HISTORY_COLUMNS = ["epoch", "strategy", "lr_cnn", "lr_bn", "lr_fc", "train_loss", "train_acc", "test_acc"]


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        # батч из одного сэмпла ломает BN, приклеиваем к предыдущему
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def train(model: Model, train_set: Dataset, strategy: Strategy, epochs: int, batch_size: int, seed: int,
          test_set: Optional[Dataset] = None, bn_stats: BnStatsPolicy = BnStatsPolicy.COUPLED
          ) -> Tuple[Model, List[EpochRecord]]:
    """
    Обучает model на месте по стратегии и возвращает (model, история по эпохам).
    Результат полностью определяется (seed, config, strategy).
    """
    if len(train_set) == 0:
        raise ConfigError("train set is empty")
    if len(train_set) < 2:
        raise ConfigError("train set needs at least 2 samples for batch statistics")
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 for batch norm, got {batch_size}")
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")

    plan = build_freeze_plan(strategy, model, bn_stats)
    required = set(plan.trainable_names)
    lr_cnn, lr_bn, lr_fc = group_learning_rates(plan, model)
    adam = AdamState.for_model(model)
    history: List[EpochRecord] = []
    logger.info(f"Training with {strategy.name}: {len(required)}/{len(plan.trainable)} trainable tensors, "
                f"lr cnn={lr_cnn} bn={lr_bn} fc={lr_fc}, {epochs} epochs")

    for epoch in range(epochs):
        total_loss, correct = 0.0, 0
        for idx in _batches(len(train_set), batch_size, seed, epoch):
            logits, cache = forward(model, train_set.images[idx], Mode.TRAIN,
                                   bn_update=plan.bn_update_running, bn_frozen=plan.bn_frozen)
            labels = train_set.labels[idx]
            loss, grad_logits = nk.softmax_cross_entropy(logits, labels)
            if not math.isfinite(loss):
                raise NumericError(f"loss became non-finite at epoch {epoch + 1}")
            grads = backward(model, cache, grad_logits, required=required)
            adam_step(model, grads, plan, adam)
            total_loss += loss * len(idx)
            correct += int((np.argmax(logits, axis=1) == labels).sum())

        record = EpochRecord(
            epoch=epoch + 1,
            strategy=strategy.name,
            lr_cnn=lr_cnn,
            lr_bn=lr_bn,
            lr_fc=lr_fc,
            train_loss=total_loss / len(train_set),
            train_acc=correct / len(train_set),
            test_acc=evaluate(model, test_set) if test_set is not None else None,
        )
        history.append(record)
        logger.info(f"[{strategy.name}] epoch {record.epoch}/{epochs}: loss={record.train_loss:.4f} "
                    f"train_acc={record.train_acc:.4f} test_acc={record.test_acc}")
    return model, history


def accuracy_from_logits(logits: np.ndarray, labels) -> float:
    """Top-1 accuracy; при равенстве побеждает класс с меньшим индексом"""
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        raise ConfigError("cannot compute accuracy of an empty set")
    return float((np.argmax(logits, axis=1) == labels).mean())


def predict_logits(model: Model, dataset: Dataset, batch_size: int = 64) -> np.ndarray:
    chunks = [forward(model, dataset.images[i:i + batch_size], Mode.EVAL)[0]
              for i in range(0, len(dataset), batch_size)]
    return np.concatenate(chunks, axis=0)


def evaluate(model: Model, dataset: Dataset, batch_size: int = 64) -> float:
    if len(dataset) == 0:
        raise ConfigError("evaluation dataset is empty")
    return accuracy_from_logits(predict_logits(model, dataset, batch_size), dataset.labels)


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_history_csv(history: List[EpochRecord], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for record in history:
            writer.writerow([_fmt(getattr(record, column)) for column in HISTORY_COLUMNS])
    logger.info(f"History written: {path}")
