"""Command-line driver: classify, evaluate, train, bench, inspect, make-toy.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import weights as mvw
from .data import load_image, make_toy_dataset, read_labels, scan_dataset, write_labels
from .errors import ArchiveError, ConfigError, ContractError, DecodeError, DimensionError, IngestionError, LabelError, NumericError
from .metrics import bench, evaluate
from .model import ModelGraph, build_baseline_cnn, build_mobilevitv2_050, predict
from .tensor import Tensor
from .train import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "LEAFVIT_THREADS"

log = logging.getLogger("leafvit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def model_from_archive(archive: mvw.WeightArchive) -> ModelGraph:
    """Rebuild the architecture an archive was saved from and load it strictly."""
    if "head.bias" not in archive.tensors:
        raise ArchiveError("archive has no head.bias; cannot infer class count", field="name")
    num_classes = archive["head.bias"].shape[0]
    if "stem.conv.weight" in archive.tensors:
        model = build_mobilevitv2_050(num_classes)
    elif "convs.0.weight" in archive.tensors:
        model = build_baseline_cnn(num_classes)
    else:
        raise ArchiveError("archive matches no known architecture", field="name")
    mvw.apply(model, archive, strict=True)
    return model.eval()


def load_model(path: str | Path) -> ModelGraph:
    return model_from_archive(mvw.load(path))


def _print_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_classify(args) -> int:
    model = load_model(args.model)
    labels = read_labels(args.labels)
    if len(labels) != model.num_classes:
        raise LabelError(f"label file has {len(labels)} classes but the model head has {model.num_classes}")
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    image = load_image(args.image, model.input_size)
    probs = predict(model, Tensor(image.data[None])).data[0]
    order = np.argsort(-probs, kind="stable")[: min(args.topk, len(labels))]
    _print_json([{"label": labels[i], "prob": float(probs[i])} for i in order])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    labels = read_labels(args.labels)
    if len(labels) != model.num_classes:
        raise LabelError(f"label file has {len(labels)} classes but the model head has {model.num_classes}")
    index = scan_dataset(args.data_dir, args.seed)
    if index.labels != labels:
        raise LabelError(f"dataset classes {index.labels} differ from label file {labels}")
    report = evaluate(model, index, args.split, args.batch_size)
    report.write(args.out)
    sys.stdout.write(f"seed: {args.seed}\nsplit: {args.split}\n")
    sys.stdout.write(report.format_table())
    return EXIT_OK


def cmd_train(args) -> int:
    index = scan_dataset(args.data_dir, args.seed)
    if len(index.labels) != args.num_classes:
        raise LabelError(f"--num-classes {args.num_classes} but the dataset has {len(index.labels)} classes")
    cfg = TrainConfig(
        lr=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, factor=args.factor,
        patience=args.patience, min_lr=args.min_lr, early_stop_patience=args.early_stop_patience,
        min_delta=args.min_delta, seed=args.seed, finetune=args.finetune,
    )
    if cfg.lr == 0:
        log.warning("--lr 0: weights will not change")
    model = (build_baseline_cnn if args.arch == "baseline" else build_mobilevitv2_050)(args.num_classes, args.seed)
    if args.init_weights:
        result = mvw.apply(model, mvw.load(args.init_weights), strict=False)
        log.info("init weights: loaded %d tensors, reinitialized %s", len(result.loaded), result.skipped)
    best, history = train(model, index, cfg)
    out = Path(args.out)
    mvw.save(best, out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    history.write_csv(log_path, timing=not args.no_timing)
    if args.labels_out:
        write_labels(index.labels, args.labels_out)
    best_row = history.best
    sys.stdout.write(
        f"seed: {args.seed}\n"
        f"epochs run: {len(history.rows)}\n"
        f"best epoch: {best_row.epoch}\n"
        f"best val_loss: {best_row.val_loss:.6f}\n"
        f"best val_acc: {best_row.val_acc:.6f}\n"
        f"weights: {out}\n"
        f"log: {log_path}\n"
    )
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.model:
        model = load_model(args.model)
    else:
        model = (build_baseline_cnn if args.arch == "baseline" else build_mobilevitv2_050)(args.num_classes, args.seed)
    report = bench(model, args.iters, args.warmup, args.seed)
    sys.stdout.write(report.to_json())
    return EXIT_OK


def cmd_inspect(args) -> int:
    sys.stdout.write(mvw.inspect(args.weights).format())
    return EXIT_OK


def cmd_make_toy(args) -> int:
    root = make_toy_dataset(args.out, args.per_class, seed=args.seed)
    sys.stdout.write(f"seed: {args.seed}\nwrote {3 * args.per_class} images under {root}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="leafvit", description="MobileViTV2_050 leaf-disease classifier engine")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("classify", help="top-k classes for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--topk", type=int, default=3)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="metrics report over a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--out", required=True, help="report JSON path; CSVs are written beside it")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train", help="fine-tune on a directory-per-class dataset")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--num-classes", type=int, required=True)
    p.add_argument("--init-weights")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--labels-out", help="also write the label vocabulary here")
    p.add_argument("--finetune", choices=("head", "full"), default="head")
    p.add_argument("--arch", choices=("mobilevitv2_050", "baseline"), default="mobilevitv2_050")
    p.add_argument("--factor", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--min-lr", type=float, default=1e-6)
    p.add_argument("--early-stop-patience", type=int, default=5)
    p.add_argument("--min-delta", type=float, default=0.0)
    p.add_argument("--no-timing", action="store_true", help="leave the seconds column of the log empty")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="parameter, MAC and FPS report")
    p.add_argument("--model", help="MVW1 archive; omit to bench a freshly built model")
    p.add_argument("--arch", choices=("mobilevitv2_050", "baseline"), default="mobilevitv2_050")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="list the tensors of an MVW1 archive")
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("make-toy", help="write the synthetic 3-class color-patch dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)
    return parser


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return contextlib.nullcontext()
    try:
        limit = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, limit))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArchiveError, DecodeError, IngestionError, LabelError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
