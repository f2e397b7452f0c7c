"""
Сетка экспериментов: сплиты x стратегии x seeds.

Для каждого seed: source и target домены, предобучение на source,
затем каждая ячейка (split, strategy, seed) дообучается на few-shot выборке target.
Ячейка пишет свою папку:
    model.ftckpt     итоговые веса
    history.csv      история по эпохам
    divergence.csv   KL слоев против предобученной модели
    result.json      пишется последним, по нему ячейка считается готовой

Для пар сплитов одной стратегии: seed-S/pairs/<strategy>/<k1>-<k2>.csv.
В корень output_dir пишутся results.csv, summary.csv и trends.json.
"""
import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from checkpoint import atomic_write, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from divergence import KlMode, emit_divergence_report, layer_divergence_profile, summarize_profile
from errors import ConfigError
from finetune import BnStatsPolicy, StrategyKind, evaluate, parse_strategy, train, write_history_csv
from mininet import ModelConfig, build_model, reinit_head
from settings import DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_WORKERS, validate_config
from synth_data import NUM_CLASSES, TaskSpec, few_shot_split, generate_dataset, generate_splits, make_source_target_pair

Split = Union[int, Literal["all"]]

RESULT_COLUMNS = ["seed", "split", "strategy", "test_acc", "status"]
SUMMARY_COLUMNS = ["split", "strategy", "mean_test_acc", "runs"]

PRETRAINED_FILE = "pretrained.ftckpt"
POOL_FILE = "target_pool.ftdata"
TEST_FILE = "target_test.ftdata"
RESULT_FILE = "result.json"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: Literal[1] = 1
    model: ModelConfig = ModelConfig()
    source_task: TaskSpec = TaskSpec()
    target_task: Optional[TaskSpec] = None
    shift_magnitude: float = Field(0.8, ge=0.0, le=1.0)
    source_per_class: int = Field(100, ge=1)
    target_pool_per_class: int = Field(60, ge=1)
    test_per_class: int = Field(20, ge=1)
    splits: List[Split] = Field(default_factory=lambda: [20, 40, "all"], min_length=1)
    strategies: List[str] = Field(
        default_factory=lambda: ["scratch", "fc", "cnn-fc", "bn-fc", "all-uniform", "diff-lr"], min_length=1
    )
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    epochs: int = Field(DEFAULT_EPOCHS, ge=0)
    pretrain_epochs: int = Field(DEFAULT_EPOCHS, ge=0)
    batch_size: int = Field(DEFAULT_BATCH_SIZE, ge=2)
    bn_stats: BnStatsPolicy = BnStatsPolicy.COUPLED
    reinit_head: bool = True
    divergence_mode: KlMode = KlMode.STANDARD
    workers: int = Field(DEFAULT_WORKERS, ge=1)
    output_dir: str = "runs"

    @field_validator("strategies")
    @classmethod
    def _known_strategies(cls, value: List[str]) -> List[str]:
        names = []
        for text in value:
            try:
                names.append(parse_strategy(text).name)
            except ConfigError as e:
                raise ValueError(str(e)) from e
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate strategies in {names}")
        return names

    @field_validator("seeds")
    @classmethod
    def _unique_seeds(cls, value: List[int]) -> List[int]:
        if len(set(value)) != len(value) or any(s < 0 for s in value):
            raise ValueError("seeds must be unique non-negative integers")
        return value

    @model_validator(mode="after")
    def _check_grid(self) -> "ExperimentConfig":
        for split in self.splits:
            if split != "all" and not 1 <= split <= self.target_pool_per_class:
                raise ValueError(f"split {split} outside 1..target_pool_per_class={self.target_pool_per_class}")
        if len(set(map(str, self.splits))) != len(self.splits):
            raise ValueError(f"duplicate splits in {self.splits}")
        for name in self.strategies:
            strategy = parse_strategy(name)
            outside = sorted(s for s in strategy.stages if not 1 <= s <= self.model.stages)
            if outside:
                raise ValueError(f"strategy {name}: stages {outside} outside 1..{self.model.stages}")
        if self.model.num_classes != NUM_CLASSES:
            raise ValueError(f"model.num_classes must be {NUM_CLASSES} for the synthetic task")
        if self.model.input_size != self.source_task.image_size:
            raise ValueError("model.input_size must equal source_task.image_size")
        if self.model.in_channels != self.source_task.channels:
            raise ValueError("model.in_channels must equal source_task.channels")
        return self


def load_experiment_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read experiment config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"experiment config {path} is not valid JSON: {e}") from e
    return validate_config(ExperimentConfig, data, "experiment config")


# ==================== RESULT STORE ====================

@dataclass
class CellResult:
    seed: int
    split: str
    strategy: str
    test_acc: Optional[float]
    status: str = "ok"
    error: Optional[str] = None

    @property
    def key(self) -> Tuple[str, str, int]:
        return self.split, self.strategy, self.seed


class ResultStore:
    def __init__(self):
        """Результаты ячеек текущего прогона, ключ (split, strategy, seed)"""
        self._results: Dict[Tuple[str, str, int], CellResult] = {}

    def reset(self) -> None:
        self._results.clear()

    def record(self, result: CellResult) -> None:
        self._results[result.key] = result
        if result.status != "ok":
            logger.error(f"Cell {result.key} failed: {result.error}")

    def get(self, split: str, strategy: str, seed: int) -> Optional[CellResult]:
        return self._results.get((split, strategy, seed))

    def load_cell(self, path: str) -> Optional[CellResult]:
        """Готовая ячейка с диска (если result.json уже есть)"""
        if not os.path.exists(path):
            return None
        with open(path) as f:
            result = CellResult(**json.load(f))
        self.record(result)
        return result

    def ordered(self, config: ExperimentConfig) -> List[CellResult]:
        """Порядок (split, strategy, seed) как в конфиге"""
        rows = []
        for split in config.splits:
            for strategy in config.strategies:
                for seed in config.seeds:
                    result = self.get(str(split), strategy, seed)
                    if result is not None:
                        rows.append(result)
        return rows


result_store = ResultStore()


# ==================== PATHS ====================

def seed_dir(config: ExperimentConfig, seed: int) -> str:
    return os.path.join(config.output_dir, f"seed-{seed}")


def _slug(strategy: str) -> str:
    return strategy.replace("=", "-").replace(",", "_")


def cell_dir(config: ExperimentConfig, seed: int, split: Split, strategy: str) -> str:
    return os.path.join(seed_dir(config, seed), f"split-{split}", _slug(strategy))


def _write_json(path: str, data) -> None:
    atomic_write(path, (json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _write_csv(path: str, columns: List[str], rows: List[List]) -> None:
    buffer = io.StringIO(newline="")
    writer = csv.writer(buffer)
    writer.writerow(columns)
    writer.writerows(rows)
    atomic_write(path, buffer.getvalue().encode("utf-8"))


# ==================== PER-SEED PREPARATION ====================

def _domain_specs(config: ExperimentConfig, seed: int) -> Tuple[TaskSpec, TaskSpec]:
    source, target = make_source_target_pair(config.shift_magnitude, seed, base=config.source_task)
    if config.target_task is not None:
        target = config.target_task.model_copy(update={"seed": seed})
    return source, target


def prepare_seed(config: ExperimentConfig, seed: int) -> None:
    """Данные target и предобученная модель для одного seed; пропускается, если уже на диске"""
    directory = seed_dir(config, seed)
    paths = [os.path.join(directory, name) for name in (PRETRAINED_FILE, POOL_FILE, TEST_FILE)]
    if all(os.path.exists(p) for p in paths):
        logger.info(f"Seed {seed}: pretrained model and target data found, skipping preparation")
        return
    os.makedirs(directory, exist_ok=True)

    source_spec, target_spec = _domain_specs(config, seed)
    source_train = generate_dataset(source_spec, config.source_per_class, seed)
    target_pool, target_test = generate_splits(target_spec, config.target_pool_per_class, config.test_per_class, seed)
    save_dataset(target_pool, paths[1], {"task": target_spec.model_dump(), "seed": seed, "role": "pool"})
    save_dataset(target_test, paths[2], {"task": target_spec.model_dump(), "seed": seed, "role": "test"})

    model = build_model(config.model.model_copy(update={"init_seed": seed}))
    logger.info(f"Seed {seed}: pretraining on {len(source_train)} source samples")
    model, history = train(model, source_train, parse_strategy("scratch"), config.pretrain_epochs,
                           config.batch_size, seed, bn_stats=config.bn_stats)
    write_history_csv(history, os.path.join(directory, "pretrain_history.csv"))
    save_checkpoint(model, paths[0])


# ==================== CELLS ====================

def run_cell(config: ExperimentConfig, seed: int, split: Split, strategy_name: str) -> CellResult:
    """Одна ячейка сетки; ошибки не пробрасываются, а попадают в статус"""
    directory = cell_dir(config, seed, split, strategy_name)
    try:
        os.makedirs(directory, exist_ok=True)
        base = seed_dir(config, seed)
        pretrained_path = os.path.join(base, PRETRAINED_FILE)
        pool = load_dataset(os.path.join(base, POOL_FILE))
        test = load_dataset(os.path.join(base, TEST_FILE))
        train_set = pool if split == "all" else few_shot_split(pool, split, seed)[0]

        strategy = parse_strategy(strategy_name)
        if strategy.kind == StrategyKind.SCRATCH:
            model = build_model(config.model.model_copy(update={"init_seed": seed}))
        else:
            model = load_checkpoint(pretrained_path)
            if config.reinit_head:
                reinit_head(model, NUM_CLASSES, seed)

        model, history = train(model, train_set, strategy, config.epochs, config.batch_size, seed,
                               test_set=test, bn_stats=config.bn_stats)
        model_path = os.path.join(directory, "model.ftckpt")
        save_checkpoint(model, model_path)
        write_history_csv(history, os.path.join(directory, "history.csv"))

        profile = layer_divergence_profile(pretrained_path, model_path, mode=config.divergence_mode)
        emit_divergence_report(profile, os.path.join(directory, "divergence.csv"), "csv")

        result = CellResult(seed, str(split), strategy_name, evaluate(model, test))
        _write_json(os.path.join(directory, RESULT_FILE), asdict(result))
        return result
    except Exception as e:
        return CellResult(seed, str(split), strategy_name, None, status="failed", error=f"{type(e).__name__}: {e}")


def _run_cell_job(config_data: Dict, seed: int, split: Split, strategy_name: str) -> Dict:
    config = ExperimentConfig.model_validate(config_data)
    return asdict(run_cell(config, seed, split, strategy_name))


# ==================== REPORTS ====================

def _fmt_acc(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def write_results(config: ExperimentConfig, rows: List[CellResult]) -> str:
    path = os.path.join(config.output_dir, "results.csv")
    _write_csv(path, RESULT_COLUMNS,
               [[r.seed, r.split, r.strategy, _fmt_acc(r.test_acc), r.status] for r in rows])
    return path


def mean_accuracy(config: ExperimentConfig) -> Dict[Tuple[str, str], Tuple[Optional[float], int]]:
    """Средняя test accuracy по (split, strategy) среди успешных ячеек"""
    summary = {}
    for split in config.splits:
        for strategy in config.strategies:
            values = [r.test_acc for seed in config.seeds
                      for r in [result_store.get(str(split), strategy, seed)]
                      if r is not None and r.status == "ok"]
            summary[(str(split), strategy)] = (float(np.mean(values)) if values else None, len(values))
    return summary


def write_summary(config: ExperimentConfig) -> str:
    path = os.path.join(config.output_dir, "summary.csv")
    rows = [[split, strategy, _fmt_acc(mean), runs]
            for (split, strategy), (mean, runs) in mean_accuracy(config).items()]
    _write_csv(path, SUMMARY_COLUMNS, rows)
    return path


def _acc(split: str, strategy: str, seed: int) -> Optional[float]:
    result = result_store.get(split, strategy, seed)
    return result.test_acc if result is not None and result.status == "ok" else None


def _both(a: Optional[float], b: Optional[float]) -> bool:
    return a is not None and b is not None


# ==================== SPLIT PAIRS ====================

def pair_report_path(config: ExperimentConfig, seed: int, strategy: str, split_a: Split, split_b: Split) -> str:
    return os.path.join(seed_dir(config, seed), "pairs", _slug(strategy), f"{split_a}-{split_b}.csv")


def write_pair_reports(config: ExperimentConfig) -> List[str]:
    """KL слоев между моделями одной стратегии, дообученными на разных сплитах (порядок сплитов из конфига)"""
    written = []
    for seed in config.seeds:
        for strategy in config.strategies:
            for i, split_a in enumerate(config.splits):
                for split_b in config.splits[i + 1:]:
                    if _acc(str(split_a), strategy, seed) is None or _acc(str(split_b), strategy, seed) is None:
                        continue
                    path = pair_report_path(config, seed, strategy, split_a, split_b)
                    os.makedirs(os.path.dirname(path), exist_ok=True)
                    profile = layer_divergence_profile(
                        os.path.join(cell_dir(config, seed, split_a, strategy), "model.ftckpt"),
                        os.path.join(cell_dir(config, seed, split_b, strategy), "model.ftckpt"),
                        mode=config.divergence_mode,
                    )
                    emit_divergence_report(profile, path, "csv")
                    written.append(path)
    logger.info(f"Wrote {len(written)} split-pair divergence report(s)")
    return written


# ==================== TRENDS ====================

def _seed_clauses(config: ExperimentConfig, seed: int) -> Dict[str, Optional[bool]]:
    numeric = sorted(s for s in config.splits if s != "all")
    smallest = str(numeric[0]) if numeric else None
    largest = "all" if "all" in config.splits else (str(numeric[-1]) if numeric else None)
    clauses: Dict[str, Optional[bool]] = {}

    bn_fc, fc = (_acc(smallest, "bn-fc", seed), _acc(smallest, "fc", seed)) if smallest else (None, None)
    clauses["bn_fc_beats_fc_smallest_split"] = bn_fc >= fc if _both(bn_fc, fc) else None

    pairs = [(_acc(str(k), "diff-lr", seed), _acc(str(k), "all-uniform", seed)) for k in numeric]
    clauses["diff_lr_beats_all_uniform"] = (all(d >= u for d, u in pairs)
                                            if pairs and all(_both(d, u) for d, u in pairs) else None)

    def gain(split: Optional[str]) -> Optional[float]:
        if split is None:
            return None
        scratch = _acc(split, "scratch", seed)
        tuned = [_acc(split, s, seed) for s in config.strategies if s != "scratch"]
        tuned = [a for a in tuned if a is not None]
        return max(tuned) - scratch if scratch is not None and tuned else None

    small_gain, full_gain = gain(smallest), gain(largest)
    clauses["gain_larger_on_smallest_split"] = (small_gain > full_gain
                                                if _both(small_gain, full_gain) and smallest != largest else None)

    spearman, bn_exceeds, last_bias = None, None, None
    for strategy in ("diff-lr", "all-uniform"):
        report = os.path.join(cell_dir(config, seed, smallest, strategy), "divergence.csv") if smallest else None
        if report and _acc(smallest, strategy, seed) is not None and os.path.exists(report):
            profile = layer_divergence_profile(os.path.join(seed_dir(config, seed), PRETRAINED_FILE),
                                               os.path.join(os.path.dirname(report), "model.ftckpt"),
                                               mode=config.divergence_mode)
            summary = summarize_profile(profile)
            spearman = summary.cnn_depth_spearman > 0 if summary.cnn_depth_spearman is not None else None
            bn_exceeds = summary.bn_exceeds_cnn
            last_bias = summary.last_bn_bias_largest
            break
    clauses["cnn_kl_grows_with_depth"] = spearman
    clauses["bn_kl_exceeds_cnn_kl"] = bn_exceeds
    clauses["last_bn_bias_kl_largest"] = last_bias
    return clauses


def evaluate_trends(config: ExperimentConfig) -> Dict:
    """Проверка трендов по каждому seed и вердикт большинством"""
    per_seed = {str(seed): _seed_clauses(config, seed) for seed in config.seeds}
    verdicts = {}
    for clause in next(iter(per_seed.values())):
        votes = [clauses[clause] for clauses in per_seed.values() if clauses[clause] is not None]
        verdicts[clause] = {
            "holds": sum(votes),
            "evaluated": len(votes),
            "majority": 2 * sum(votes) > len(votes) if votes else None,
        }
    mean = {f"{split}/{strategy}": value for (split, strategy), (value, _) in mean_accuracy(config).items()}
    return {"per_seed": per_seed, "verdicts": verdicts, "mean_test_acc": mean}


def write_trends(config: ExperimentConfig) -> str:
    path = os.path.join(config.output_dir, "trends.json")
    _write_json(path, evaluate_trends(config))
    return path


# ==================== RUNNER ====================

def run_experiment(config: ExperimentConfig) -> List[CellResult]:
    if not os.path.isdir(config.output_dir):
        os.makedirs(config.output_dir)
    _write_json(os.path.join(config.output_dir, "experiment.json"), config.model_dump(mode="json"))
    result_store.reset()

    pending: List[Tuple[int, Split, str]] = []
    for split in config.splits:
        for strategy in config.strategies:
            for seed in config.seeds:
                done = result_store.load_cell(os.path.join(cell_dir(config, seed, split, strategy), RESULT_FILE))
                if done is not None:
                    logger.warning(f"Cell ({split}, {strategy}, {seed}) already done, resuming past it")
                else:
                    pending.append((seed, split, strategy))
    total = len(config.seeds) * len(config.splits) * len(config.strategies)
    logger.info(f"Experiment grid: {len(pending)} pending cell(s), {total - len(pending)} done")

    for seed in sorted({seed for seed, _, _ in pending}):
        prepare_seed(config, seed)

    if config.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_run_cell_job, config.model_dump(mode="json"), *cell) for cell in pending]
            for future in futures:
                result_store.record(CellResult(**future.result()))
    else:
        for cell in pending:
            result_store.record(run_cell(config, *cell))

    rows = result_store.ordered(config)
    write_results(config, rows)
    write_summary(config)
    write_pair_reports(config)
    write_trends(config)
    failed = sum(r.status != "ok" for r in rows)
    logger.info(f"Experiment finished: {len(rows)} cells, {failed} failed, outputs in {config.output_dir}")
    return rows
