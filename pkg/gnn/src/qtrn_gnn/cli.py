"""Command line entry points: qtrn-gnn train / qtrn-gnn predict.

Exit code 0 on success, 1 on runtime failures (printed as "error: ..."),
2 on argument errors. QTRN_GNN_LOG sets the log level (DEBUG, INFO,
WARNING, ERROR); the default is INFO so training progress is visible.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__
from .train import TrainConfig, train
from .predict import predict_to_csv

logger = logging.getLogger("qtrn_gnn.cli")

_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR"}


def _setup_logging() -> None:
    env = os.environ.get("QTRN_GNN_LOG", "").strip().upper()
    if env and env not in _LEVELS:
        raise SystemExit(f"QTRN_GNN_LOG has unknown level {env!r}")
    logging.basicConfig(
        level=getattr(logging, env or "INFO"),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _cmd_train(args: argparse.Namespace) -> int:
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        epoch_fraction=args.epoch_fraction,
        val_subsample=args.val_subsample,
        seed=args.seed,
        patience=args.patience,
    )
    result = train(args.train_dir, args.val or (), args.out, config)
    print(
        f"trained {len(result.history)} epochs; best epoch {result.best_epoch} "
        f"(score {result.best_score:.3f}%) -> {result.best_checkpoint}"
    )
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    out = predict_to_csv(args.checkpoint, args.dataset_dir, args.out, args.source)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qtrn-gnn",
        description="Fine-tune queueing-baseline delay predictions with message passing.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a converted dataset directory")
    p.add_argument("train_dir", help="converted training dataset")
    p.add_argument(
        "--val",
        action="append",
        metavar="DIR",
        help="converted validation dataset (repeatable; sets 2 and 3 drive model selection)",
    )
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    p.add_argument(
        "--epoch-fraction",
        type=float,
        default=TrainConfig.epoch_fraction,
        help="share of the training set visited per epoch",
    )
    p.add_argument(
        "--val-subsample",
        type=int,
        default=TrainConfig.val_subsample,
        help="fixed number of leading samples evaluated per validation set",
    )
    p.add_argument("--seed", type=int, default=TrainConfig.seed)
    p.add_argument(
        "--patience",
        type=int,
        default=None,
        help="stop after this many epochs without improvement (default: run all epochs)",
    )
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="write predictions for a converted dataset")
    p.add_argument("checkpoint", help="checkpoint file written by train")
    p.add_argument("dataset_dir", help="converted dataset to predict")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--source", default=None, help="source tag in the CSV (default: gnn-<variant>)")
    p.set_defaults(func=_cmd_predict)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging()
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
