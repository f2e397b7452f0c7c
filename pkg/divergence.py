"""
Дивергенция весов между двумя чекпоинтами.

Каждый тензор слоя аппроксимируется гауссианой N(mu, sigma^2), расстояние между
одноименными слоями - KL(N_A || N_B) в замкнутой форме:

    standard: ln(sigma_B / sigma_A) + (sigma_A^2 + (mu_A - mu_B)^2) / (2 sigma_B^2) - 1/2
    paper:    то же без -1/2

Смещение 0.5 не меняет ранжирование слоев.
"""
import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Union

import numpy as np
from loguru import logger
from scipy.stats import spearmanr

from checkpoint import Checkpoint, read_checkpoint
from errors import ComparisonError, ConfigError, EmptyInputError, NumericError, OutputError

VARIANCE_FLOOR = 1e-12
REPORT_COLUMNS = ["layer_name", "stage", "group", "mode", "kl", "degenerate"]
_STAGE_RE = re.compile(r"^s(\d+)\.")


class KlMode(str, Enum):
    STANDARD = "standard"
    PAPER_VERBATIM = "paper"


class DivergenceGroup(str, Enum):
    CNN = "CNN"
    BN_WEIGHT = "BnWeight"
    BN_BIAS = "BnBias"
    FC = "FC"


GROUP_ALIASES = {
    "all": frozenset(DivergenceGroup),
    "cnn": frozenset({DivergenceGroup.CNN}),
    "bn": frozenset({DivergenceGroup.BN_WEIGHT, DivergenceGroup.BN_BIAS}),
    "bn-weight": frozenset({DivergenceGroup.BN_WEIGHT}),
    "bn-bias": frozenset({DivergenceGroup.BN_BIAS}),
    "fc": frozenset({DivergenceGroup.FC}),
}


def parse_group_filter(text: str) -> FrozenSet[DivergenceGroup]:
    selected = set()
    for part in text.lower().split(","):
        part = part.strip()
        if part not in GROUP_ALIASES:
            raise ConfigError(f"unknown group {part!r} (known: {', '.join(GROUP_ALIASES)})")
        selected |= GROUP_ALIASES[part]
    return frozenset(selected)


# ==================== GAUSSIAN / KL ====================

@dataclass(frozen=True)
class GaussianSummary:
    mu: float
    sigma2: float
    n: int
    degenerate: bool


def fit_gaussian(tensor) -> GaussianSummary:
    """Среднее и смещенная дисперсия (деление на n); дисперсия ниже 1e-12 поднимается до пола"""
    values = np.asarray(tensor, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyInputError("cannot fit a Gaussian to an empty tensor")
    mu = float(values.mean())
    sigma2 = float(((values - mu) ** 2).mean())
    degenerate = sigma2 < VARIANCE_FLOOR
    return GaussianSummary(mu, VARIANCE_FLOOR if degenerate else sigma2, int(values.size), degenerate)


def kl_divergence(a: GaussianSummary, b: GaussianSummary, mode: KlMode = KlMode.STANDARD) -> float:
    for label, summary in (("A", a), ("B", b)):
        if not (math.isfinite(summary.mu) and math.isfinite(summary.sigma2)):
            raise NumericError(f"non-finite Gaussian parameters for {label}: {summary}")
        if summary.sigma2 <= 0.0:
            raise NumericError(f"variance of {label} must be positive, got {summary.sigma2}")

    standard = (0.5 * math.log(b.sigma2 / a.sigma2)
                + (a.sigma2 + (a.mu - b.mu) ** 2) / (2.0 * b.sigma2)
                - 0.5)
    standard = max(standard, 0.0)
    if KlMode(mode) == KlMode.PAPER_VERBATIM:
        return standard + 0.5
    return standard


# ==================== PROFILE ====================

@dataclass
class DivergenceRow:
    layer_name: str
    stage: int
    group: DivergenceGroup
    kl: float
    mode: KlMode
    degenerate: bool

    def to_dict(self) -> Dict:
        return {"layer_name": self.layer_name, "stage": self.stage, "group": self.group.value,
                "mode": self.mode.value, "kl": self.kl, "degenerate": self.degenerate}


@dataclass
class DivergenceProfile:
    rows: List[DivergenceRow]
    metadata: Dict[str, Union[str, List[str]]] = field(default_factory=dict)

    def by_group(self, group: DivergenceGroup) -> List[DivergenceRow]:
        return [row for row in self.rows if row.group == group]


def tensor_group(name: str, include_bias: bool = False) -> Optional[DivergenceGroup]:
    if name.endswith(".conv.weight"):
        return DivergenceGroup.CNN
    if name.endswith(".bn.gamma"):
        return DivergenceGroup.BN_WEIGHT
    if name.endswith(".bn.beta"):
        return DivergenceGroup.BN_BIAS
    if name.endswith(".fc.weight"):
        return DivergenceGroup.FC
    if include_bias and name.endswith(".conv.bias"):
        return DivergenceGroup.CNN
    if include_bias and name.endswith(".fc.bias"):
        return DivergenceGroup.FC
    # running статистики BN сюда не входят
    return None


def _tensor_stage(name: str, head_stage: int) -> int:
    match = _STAGE_RE.match(name)
    return int(match.group(1)) if match else head_stage


def _as_checkpoint(ckpt: Union[str, Checkpoint]) -> Checkpoint:
    return read_checkpoint(ckpt) if isinstance(ckpt, str) else ckpt


def layer_divergence_profile(ckpt_a: Union[str, Checkpoint], ckpt_b: Union[str, Checkpoint],
                             group_filter: Optional[Iterable[DivergenceGroup]] = None,
                             mode: KlMode = KlMode.STANDARD, include_bias: bool = False) -> DivergenceProfile:
    """Одна строка на тензор слоя, порядок - порядок определения модели (от мелких слоев к глубоким)"""
    a, b = _as_checkpoint(ckpt_a), _as_checkpoint(ckpt_b)
    layout_a = [(e.name, e.shape) for e in a.manifest]
    layout_b = [(e.name, e.shape) for e in b.manifest]
    if layout_a != layout_b:
        differing = sorted({n for n, _ in set(layout_a) ^ set(layout_b)})
        raise ComparisonError(f"checkpoints have different manifests: {differing or 'order differs'}", differing)

    groups = frozenset(group_filter) if group_filter is not None else frozenset(DivergenceGroup)
    mode = KlMode(mode)
    head_stage = int(a.config.get("stages", 0)) + 1

    rows = []
    for name, _ in layout_a:
        group = tensor_group(name, include_bias)
        if group is None or group not in groups:
            continue
        ga, gb = fit_gaussian(a.tensors[name]), fit_gaussian(b.tensors[name])
        if ga.degenerate or gb.degenerate:
            logger.debug(f"Degenerate Gaussian for {name} (variance floored to {VARIANCE_FLOOR})")
        rows.append(DivergenceRow(name, _tensor_stage(name, head_stage), group,
                                  kl_divergence(ga, gb, mode), mode, ga.degenerate or gb.degenerate))

    metadata = {
        "checkpoint_a": ckpt_a if isinstance(ckpt_a, str) else "<memory>",
        "checkpoint_b": ckpt_b if isinstance(ckpt_b, str) else "<memory>",
        "mode": mode.value,
        "groups": sorted(g.value for g in groups),
    }
    return DivergenceProfile(rows, metadata)


# ==================== REPORTS ====================

def emit_divergence_report(profile: DivergenceProfile, path: str, fmt: str = "csv") -> None:
    fmt = fmt.lower()
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown report format {fmt!r} (csv or json)")
    try:
        with open(path, "w", newline="") as f:
            if fmt == "csv":
                writer = csv.writer(f)
                writer.writerow(REPORT_COLUMNS)
                for row in profile.rows:
                    writer.writerow([row.layer_name, row.stage, row.group.value, row.mode.value,
                                     repr(row.kl), "true" if row.degenerate else "false"])
            else:
                json.dump({"metadata": profile.metadata, "rows": [r.to_dict() for r in profile.rows]}, f, indent=2)
    except OSError as e:
        raise OutputError(f"cannot write divergence report to {path}: {e}", path=path) from e
    logger.info(f"Divergence report written: {path} ({len(profile.rows)} rows, {fmt})")


def load_divergence_report(path: str) -> DivergenceProfile:
    with open(path) as f:
        data = json.load(f)
    rows = [DivergenceRow(r["layer_name"], int(r["stage"]), DivergenceGroup(r["group"]), float(r["kl"]),
                          KlMode(r["mode"]), bool(r["degenerate"])) for r in data["rows"]]
    return DivergenceProfile(rows, data.get("metadata", {}))


# ==================== SUMMARY ====================

@dataclass
class ProfileSummary:
    mean_kl: Dict[str, float]
    cnn_depth_spearman: Optional[float]
    bn_exceeds_cnn: Optional[bool]
    last_bn_bias_largest: Optional[bool]

    def to_dict(self) -> Dict:
        return asdict(self)


def summarize_profile(profile: DivergenceProfile) -> ProfileSummary:
    """
    Сводка по профилю: средний KL по группам, ранговая корреляция глубины сверток с KL,
    больше ли средний KL параметров BN чем сверток, и самый ли большой KL у beta последнего BN.
    """
    mean_kl = {}
    for group in DivergenceGroup:
        values = [r.kl for r in profile.by_group(group)]
        if values:
            mean_kl[group.value] = float(np.mean(values))

    cnn = [r.kl for r in profile.by_group(DivergenceGroup.CNN)]
    spearman = None
    if len(cnn) >= 2 and len(set(cnn)) > 1:
        spearman = float(spearmanr(np.arange(1, len(cnn) + 1), cnn)[0])

    bn = [r.kl for r in profile.rows if r.group in (DivergenceGroup.BN_WEIGHT, DivergenceGroup.BN_BIAS)]
    bn_exceeds = bool(np.mean(bn) > np.mean(cnn)) if bn and cnn else None

    bias = [r.kl for r in profile.by_group(DivergenceGroup.BN_BIAS)]
    last_largest = bool(bias[-1] >= max(bias)) if bias else None

    return ProfileSummary(mean_kl, spearman, bn_exceeds, last_largest)
