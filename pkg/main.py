#!/usr/bin/env python3
"""
CLI лаборатории дообучения: генерация данных, предобучение, дообучение по стратегии,
оценка, отчет о дивергенции весов и сетка экспериментов.

Коды выхода: 0 успех, 1 ошибка использования, 2 ошибка данных/формата, 3 численный сбой.
"""
from dotenv import load_dotenv
load_dotenv()

import argparse
import json
import os
import sys
from typing import List, Optional

from loguru import logger

from checkpoint import atomic_write, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from divergence import KlMode, emit_divergence_report, layer_divergence_profile, parse_group_filter
from errors import EXIT_DATA, EXIT_OK, EXIT_USAGE, ConfigError, LabError
from experiment import ExperimentConfig, load_experiment_config, run_experiment
from finetune import BnStatsPolicy, evaluate, parse_strategy, train, write_history_csv
from mininet import ModelConfig, build_model, reinit_head
from settings import DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, LOG_LEVEL, setup_logging, validate_config
from synth_data import NUM_CLASSES, TaskSpec, generate_splits, make_source_target_pair


class LabArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path: str, what: str):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read {what} {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} {path} is not valid JSON: {e}") from e


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _history_path(args, out: str) -> str:
    return args.history or f"{os.path.splitext(out)[0]}.history.csv"


# ==================== COMMANDS ====================

def cmd_gen_data(args) -> int:
    out = args.out or "data"
    if not os.path.isdir(out):
        raise ConfigError(f"output directory does not exist: {out}")
    seed = _seed(args)
    if args.config:
        base = validate_config(TaskSpec, _read_json(args.config, "task spec"), "task spec")
    else:
        base = validate_config(TaskSpec, {"image_size": args.image_size, "channels": args.channels}, "task spec")

    source, target = make_source_target_pair(args.shift, seed, base=base)
    spec = target if args.domain == "target" else source
    train_set, test_set = generate_splits(spec, args.per_class, args.test_per_class, seed)

    meta = {"task": spec.model_dump(mode="json"), "seed": seed, "domain": args.domain, "shift": args.shift}
    save_dataset(train_set, os.path.join(out, "train.ftdata"), meta)
    save_dataset(test_set, os.path.join(out, "test.ftdata"), meta)
    manifest = dict(meta, per_class=args.per_class, test_per_class=args.test_per_class,
                    files={"train": "train.ftdata", "test": "test.ftdata"},
                    samples={"train": len(train_set), "test": len(test_set)})
    atomic_write(os.path.join(out, "manifest.json"),
                 (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    logger.info(f"Generated {len(train_set)} train / {len(test_set)} test samples in {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out = args.out or "pretrained.ftckpt"
    data = load_dataset(args.data)
    test = load_dataset(args.test) if args.test else None
    raw = _read_json(args.config, "model config") if args.config else {
        "stages": args.stages, "blocks_per_stage": args.blocks_per_stage, "base_channels": args.base_channels,
    }
    raw = dict(raw, input_size=int(data.images.shape[2]), in_channels=int(data.images.shape[1]),
               num_classes=NUM_CLASSES, init_seed=_seed(args))
    config = validate_config(ModelConfig, raw, "model config")

    model = build_model(config)
    model, history = train(model, data, parse_strategy("scratch"), args.epochs, args.batch_size, _seed(args),
                           test_set=test, bn_stats=BnStatsPolicy(args.bn_stats))
    save_checkpoint(model, out)
    write_history_csv(history, _history_path(args, out))
    return EXIT_OK


def cmd_finetune(args) -> int:
    out = args.out or "finetuned.ftckpt"
    strategy = parse_strategy(args.strategy)
    model = load_checkpoint(args.source)
    data = load_dataset(args.data)
    test = load_dataset(args.test) if args.test else None
    if args.reinit_head:
        reinit_head(model, NUM_CLASSES, _seed(args))

    model, history = train(model, data, strategy, args.epochs, args.batch_size, _seed(args),
                           test_set=test, bn_stats=BnStatsPolicy(args.bn_stats))
    save_checkpoint(model, out)
    write_history_csv(history, _history_path(args, out))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    accuracy = evaluate(model, data)
    print(f"accuracy={accuracy}")
    return EXIT_OK


def cmd_diverge(args) -> int:
    out = args.out or f"divergence.{args.format}"
    profile = layer_divergence_profile(args.ckpt_a, args.ckpt_b, parse_group_filter(args.group),
                                       KlMode(args.mode), include_bias=args.include_bias)
    emit_divergence_report(profile, out, args.format)
    return EXIT_OK


def cmd_experiment(args) -> int:
    if not args.config:
        raise ConfigError("experiment needs --config <file.json>")
    config = load_experiment_config(args.config)
    overrides = {}
    if args.out:
        overrides["output_dir"] = args.out
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.workers is not None:
        overrides["workers"] = args.workers
    if overrides:
        config = validate_config(ExperimentConfig, dict(config.model_dump(mode="json"), **overrides),
                                 "experiment config")
    rows = run_experiment(config)
    return EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_DATA


# ==================== PARSER ====================

def build_parser() -> argparse.ArgumentParser:
    common = LabArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed (по умолчанию 0)")
    common.add_argument("--out", default=None, help="Файл или папка результата")
    common.add_argument("--config", default=None, help="JSON конфиг команды")
    common.add_argument("--log-level", default=LOG_LEVEL, help="Уровень логов (DEBUG, INFO, ...)")

    training = LabArgumentParser(add_help=False)
    training.add_argument("--data", required=True, help="Обучающий .ftdata")
    training.add_argument("--test", default=None, help="Тестовый .ftdata для test_acc в истории")
    training.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    training.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    training.add_argument("--bn-stats", choices=[p.value for p in BnStatsPolicy], default=BnStatsPolicy.COUPLED.value)
    training.add_argument("--history", default=None, help="CSV истории (по умолчанию рядом с чекпоинтом)")

    parser = LabArgumentParser(description="Лаборатория дообучения CNN: стратегии заморозки и дивергенция весов")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Сгенерировать синтетические .ftdata")
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--shift", type=float, default=0.0, help="Сила сдвига домена в [0, 1]")
    p.add_argument("--domain", choices=["source", "target"], default="target")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common, training], help="Обучить модель с нуля")
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--blocks-per-stage", type=int, default=1)
    p.add_argument("--base-channels", type=int, default=8)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common, training], help="Дообучить чекпоинт по стратегии")
    p.add_argument("--from", dest="source", required=True, help="Исходный .ftckpt")
    p.add_argument("--strategy", required=True,
                   help="scratch | fc | cnn-fc | bn-fc | all-uniform | diff-lr | partial-bn=STAGES")
    p.add_argument("--reinit-head", action="store_true", help="Новая FC голова перед дообучением")
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="Accuracy чекпоинта на .ftdata")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("diverge", parents=[common], help="KL дивергенция слоев двух чекпоинтов")
    p.add_argument("ckpt_a")
    p.add_argument("ckpt_b")
    p.add_argument("--mode", choices=[m.value for m in KlMode], default=KlMode.STANDARD.value)
    p.add_argument("--group", default="all", help="all | cnn | bn | bn-weight | bn-bias | fc (через запятую)")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--include-bias", action="store_true", help="Учитывать bias сверток и FC")
    p.set_defaults(handler=cmd_diverge)

    p = sub.add_parser("experiment", parents=[common], help="Сетка сплиты x стратегии x seeds")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(handler=cmd_experiment)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except LabError as e:
        logger.error(f"{args.command}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command}: unexpected failure: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
