"""Command-line harness.

Subcommands: train, eval, gradcheck, filter-report, make-data. Training reads
IDX pairs, streams metrics as CSV, saves a checkpoint, and renders figures
next to the CSV unless --no-figures is given. A flat key=value config file
supplies defaults that explicit flags override.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import reports, train as train_mod
from .checkpoint import Checkpoint
from .optim import preset


class CliError(Exception):
    pass


def _parse_channels(text):
    parts = [int(p) for p in text.split(",") if p.strip()]
    if len(parts) != 5:
        raise argparse.ArgumentTypeError(f"need 5 channel widths, got {text!r}")
    return tuple(parts)


def _parse_drops(text):
    if not text.strip():
        return ()
    out = []
    for piece in text.split(","):
        it, factor = piece.split(":")
        out.append((int(it), float(factor)))
    return tuple(out)


# config-file key -> TrainConfig field and parser
_CONFIG_KEYS = {
    "iters": ("iterations", int),
    "iterations": ("iterations", int),
    "batch": ("batch_size", int),
    "batch_size": ("batch_size", int),
    "lr": ("base_lr", float),
    "base_lr": ("base_lr", float),
    "lr_drops": ("lr_drops", _parse_drops),
    "lambda1": ("lambda1", float),
    "lambda2": ("lambda2", float),
    "momentum": ("momentum", float),
    "seed": ("seed", int),
    "channels": ("channels", _parse_channels),
    "max_depth": ("max_depth", int),
    "fc_dim": ("fc_dim", int),
    "pattern": ("pattern", str),
    "augment": ("augment", str),
    "eval_every": ("eval_every", int),
    "log_every": ("log_every", int),
}


def _load_config_file(path):
    overrides = {}
    try:
        raw = data_mod.read_recipe(path)
    except OSError as e:
        raise CliError(f"cannot read config file: {e}")
    for key, value in raw.items():
        key = key.replace("-", "_")
        if key not in _CONFIG_KEYS:
            raise CliError(f"unknown config key {key!r} in {path}")
        field, parse = _CONFIG_KEYS[key]
        overrides[field] = parse(value)
    return overrides


def _add_train_flags(p):
    p.add_argument("--preset", choices=["desk", "paper"], default="desk",
                   help="hyperparameter bundle to start from (default: desk)")
    p.add_argument("--config", help="flat key=value config file (flags override it)")
    p.add_argument("--iters", type=int, dest="iterations")
    p.add_argument("--batch", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="base_lr")
    p.add_argument("--lr-drops", type=_parse_drops, dest="lr_drops",
                   help='e.g. "2400:0.1,3600:0.1"; empty string for none')
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--channels", type=_parse_channels,
                   help="five block widths, e.g. 16,32,32,32,32")
    p.add_argument("--max-depth", type=int, dest="max_depth", choices=[1, 2, 3, 4])
    p.add_argument("--fc-dim", type=int, dest="fc_dim")
    p.add_argument("--pattern", choices=["floor", "ceil"])
    p.add_argument("--augment", choices=["none", "rotate"])
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--log-every", type=int, dest="log_every")


def _resolve_config(args):
    overrides = {}
    if args.config:
        overrides.update(_load_config_file(args.config))
    for field in set(f for f, _ in _CONFIG_KEYS.values()):
        value = getattr(args, field, None)
        if value is not None:
            overrides[field] = value
    return preset(args.preset, **overrides)


def _idx_pair(args, role):
    """Resolve --{role}-images/--{role}-labels, falling back to --data-dir."""
    images = getattr(args, f"{role}_images", None)
    labels = getattr(args, f"{role}_labels", None)
    if images is None and args.data_dir:
        images = os.path.join(args.data_dir, f"{role}-images.idx")
        labels = os.path.join(args.data_dir, f"{role}-labels.idx")
    if images is None or labels is None:
        raise CliError(f"no {role} data: give --data-dir or --{role}-images/--{role}-labels")
    if not os.path.exists(images) or not os.path.exists(labels):
        raise CliError(f"missing {role} data files: {images}, {labels}")
    return data_mod.load_idx(images, labels)


def _cmd_train(args):
    config = _resolve_config(args)
    train_set = _idx_pair(args, "train")
    eval_set = None
    try:
        eval_set = _idx_pair(args, "test")
    except CliError:
        if args.test_images or args.test_labels:
            raise
    if args.n_per_class:
        train_set = data_mod.sample_few_shot(train_set, args.n_per_class, config.seed)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "metrics.csv")
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    log = None if args.quiet else print
    metrics, ckpt = train_mod.train(
        config, train_set, eval_set, csv_path=csv_path,
        checkpoint_path=ckpt_path, log=log,
    )
    print(f"parameters: {metrics.parameter_count}")
    print(f"final ring penalty: {metrics.final_r2!r}")
    if metrics.final_test_accuracy is not None:
        print(f"final test accuracy: {metrics.final_test_accuracy:.4f}")
    print(f"metrics: {csv_path}")
    print(f"checkpoint: {ckpt_path}")
    if not args.no_figures:
        from . import figures
        fig_path = os.path.join(args.out, "training-curves.png")
        figures.plot_training_curves(metrics.rows, metrics.eval_history, fig_path)
        print(f"figure: {fig_path}")
    return 0


def _cmd_eval(args):
    ckpt = Checkpoint.load(args.checkpoint)
    test_set = _idx_pair(args, "test")
    acc = train_mod.evaluate(ckpt, test_set, args.batch)
    print(f"accuracy: {acc:.4f} ({len(test_set)} samples)")
    return 0


def _cmd_gradcheck(args):
    report = gradcheck_mod.run_gradcheck(seed=args.seed)
    print(report.table())
    return 0 if report.ok else 1


def _cmd_filter_report(args):
    ckpt = Checkpoint.load(args.checkpoint)
    net = ckpt.restore_network()
    report = reports.filter_report(net)
    print(reports.report_table(report))
    if args.out:
        reports.write_report_csv(report, args.out)
        print(f"rows: {args.out}")
        if not args.no_figures:
            from . import figures
            base, _ = os.path.splitext(args.out)
            figures.plot_filter_report(report, base + "-variance.png")
            figures.plot_filter_grid(net, base + "-filters.png")
            print(f"figures: {base}-variance.png, {base}-filters.png")
    return 0


def _cmd_make_data(args):
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "synthetic":
        dataset = data_mod.synthetic_digits(args.n_per_class or 100, args.seed)
    else:
        if not (args.images and args.labels):
            raise CliError(f"make-data {args.kind} needs --images and --labels")
        if not (os.path.exists(args.images) and os.path.exists(args.labels)):
            raise CliError(f"missing input files: {args.images}, {args.labels}")
        source = data_mod.load_idx(args.images, args.labels)
        if args.kind == "affnist-style":
            dataset = data_mod.make_affnist_style(source, args.seed)
        elif args.kind == "rot-style":
            dataset = data_mod.make_rot_style(source, args.seed)
        elif args.kind == "few-shot":
            if not args.n_per_class:
                raise CliError("make-data few-shot needs --n-per-class")
            dataset = data_mod.sample_few_shot(source, args.n_per_class, args.seed)
    prefix = os.path.join(args.out, args.prefix)
    data_mod.save_idx(dataset, prefix + "-images.idx", prefix + "-labels.idx")
    data_mod.write_recipe(prefix + ".recipe.txt", dataset.provenance)
    print(f"wrote {len(dataset)} samples: {prefix}-images.idx, {prefix}-labels.idx")
    print(f"recipe: {prefix}.recipe.txt")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="affinet",
        description="Multi-scale maxout CNN with a ring-variance filter penalty",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network on IDX data")
    _add_train_flags(p)
    p.add_argument("--data-dir", help="directory with {train,test}-{images,labels}.idx")
    p.add_argument("--train-images")
    p.add_argument("--train-labels")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--n-per-class", type=int, dest="n_per_class",
                   help="few-shot subsample of the training set")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--batch", type=int, default=100)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    p.add_argument("--seed", type=int, default=2024)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("filter-report", help="per-layer ring variance of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="CSV path; figures are written alongside")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=_cmd_filter_report)

    p = sub.add_parser("make-data", help="generate benchmark-style IDX datasets")
    p.add_argument("kind", choices=["synthetic", "affnist-style", "rot-style", "few-shot"])
    p.add_argument("--images", help="source IDX image file")
    p.add_argument("--labels", help="source IDX label file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--prefix", default="data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, dest="n_per_class")
    p.set_defaults(fn=_cmd_make_data)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 0
    try:
        return args.fn(args)
    except (CliError, data_mod.IdxFormatError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
