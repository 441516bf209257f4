"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from meal import config as config_mod
from meal.checkpoint import load_checkpoint, save_checkpoint
from meal.data import gen_synthetic, load_dataset, save_dataset
from meal.metrics import MetricsSink
from meal.network import BlockNetwork, error_rate, spec_from_params
from meal.trainer import (TeacherZoo, build_zoo, meal_train, pretrain_teacher, run_ablation,
                          traditional_ensemble_error)

log = logging.getLogger("meal")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def load_network(path) -> BlockNetwork:
    params = {k: v for k, v in load_checkpoint(path).items() if not k.startswith("disc.")}
    return BlockNetwork(spec_from_params(params), params, frozen=True)


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def cmd_gen_data(args):
    cfg = config_mod.load(args.config)
    train, test = gen_synthetic(cfg.synthetic_spec())
    for path, ds in ((cfg.paths.train_data, train), (cfg.paths.test_data, test)):
        _ensure_parent(path)
        save_dataset(path, ds)
        print(f"wrote {len(ds)} rows to {path}")


def cmd_train_teacher(args):
    cfg = config_mod.load(args.config)
    if not 0 <= args.index < len(cfg.teachers):
        raise UsageError(f"--index must be in [0, {len(cfg.teachers)})")
    train, test = gen_synthetic(cfg.synthetic_spec())
    tt = cfg.teacher_training
    net = pretrain_teacher(cfg.teacher_specs()[args.index], train, tt.epochs, lr=tt.lr,
                           momentum=tt.momentum, batch_size=tt.batch_size)
    _ensure_parent(args.out)
    save_checkpoint(args.out, net.params)
    print(f"teacher {cfg.teachers[args.index].name}: test error_rate={error_rate(net, test):.4f}")


def cmd_meal_train(args):
    cfg = config_mod.load(args.config)
    train, test = gen_synthetic(cfg.synthetic_spec())
    zoo = TeacherZoo([load_network(p) for p in args.zoo], [Path(p).stem for p in args.zoo])
    student_spec = cfg.student_spec()
    metrics_path = args.metrics or cfg.paths.metrics
    _ensure_parent(metrics_path)
    sink = MetricsSink(metrics_path, len(student_spec.blocks))
    result = meal_train(student_spec, zoo, train, test, cfg.meal_config(), sink)
    _ensure_parent(args.out)
    save_checkpoint(args.out, result.checkpoint_params())
    print(f"student: test error_rate={error_rate(result.student, test):.4f}")


def cmd_eval(args):
    net = load_network(args.checkpoint)
    ds = load_dataset(args.dataset, num_classes=net.spec.num_classes)
    print(f"error_rate={error_rate(net, ds):.4f}")


def cmd_ensemble_eval(args):
    paths, dataset = list(args.zoo), args.dataset
    if dataset is None:
        # `--zoo a b data.csv`: the greedy option list swallowed the dataset
        if len(paths) < 2:
            raise UsageError("missing dataset argument")
        dataset = paths.pop()
    zoo = TeacherZoo([load_network(p) for p in paths])
    ds = load_dataset(dataset, num_classes=zoo.teachers[0].spec.num_classes)
    print(f"error_rate={traditional_ensemble_error(zoo, ds):.4f}")


def cmd_ablate(args):
    cfg = config_mod.load(args.config)
    train, test = gen_synthetic(cfg.synthetic_spec())
    tt = cfg.teacher_training
    zoo = build_zoo(cfg.teacher_specs(), train, tt.epochs, lr=tt.lr, momentum=tt.momentum,
                    batch_size=tt.batch_size)
    table = run_ablation(train, test, cfg.student_spec(), zoo, cfg.ablation.seeds,
                         cfg.meal_config(), workers=cfg.ablation.workers)
    print(table.format())
    if args.out:
        _ensure_parent(args.out)
        Path(args.out).write_text(table.to_csv())


def cmd_dump_config(args):
    sys.stdout.write(config_mod.dumps(config_mod.ExperimentConfig()))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="meal", description="Multi-model ensemble distillation with adversarial learning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-data", help="write the train/test CSVs named in the config")
    s.add_argument("config")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-teacher", help="pretrain one teacher on one-hot labels")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--index", type=int, default=0, help="which teacher in the config")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("meal-train", help="distil a teacher zoo into the configured student")
    s.add_argument("config")
    s.add_argument("--zoo", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", help="metrics CSV (default: paths.metrics from the config)")
    s.set_defaults(func=cmd_meal_train)

    s = sub.add_parser("eval", help="print the error rate of a checkpoint on a dataset CSV")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ensemble-eval", help="error rate of averaged teacher predictions")
    s.add_argument("--zoo", nargs="+", required=True)
    s.add_argument("dataset", nargs="?")
    s.set_defaults(func=cmd_ensemble_eval)

    s = sub.add_parser("ablate", help="run the ablation table over the configured seeds")
    s.add_argument("config")
    s.add_argument("--out", help="also write the table as CSV")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("dump-config", help="print the default configuration")
    s.set_defaults(func=cmd_dump_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\nmeal: error: missing subcommand")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"meal {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"meal {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
